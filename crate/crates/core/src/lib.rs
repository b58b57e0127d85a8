// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit discovery and causal intervention toolkit for small decoder-only
//! transformers trained on synthetic judgment tasks.

pub mod attribution;
pub mod circuits;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod signals;
pub mod stats;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
