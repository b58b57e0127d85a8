// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal experiments on a trained model.

mod ablation;
mod faithfulness;
mod fti;
mod lens;
mod pca;
mod steering;

pub use ablation::{
    accuracy_under_plan, circuit_internal_nodes, circuit_senders, iterative_ablation, phase_transition,
    zero_ablate_eval, AblationStep, EvalSuite, PhaseTransition, SuiteDelta,
};
pub use faithfulness::{
    faithfulness_curve, pooled_faithfulness, random_faithfulness_curve, FaithPoint, FaithfulnessCurve,
    BOOTSTRAP_RESAMPLES,
};
pub use fti::{fti, fti_instance, transfer_plan, FtiInstance, FtiReport, SOURCE_EV_THRESHOLD};
pub use lens::{logit_lens, LensReadout};
pub use pca::{pc1, pc1_overlap};
pub use steering::{
    haar_rotation, random_rotation_control, steer, steer_rotated, steering_vectors, HookVector, SteerOutput,
    SteeringBundle, DEFAULT_ALPHAS,
};
