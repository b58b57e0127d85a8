// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-instance judgment signals and their rank agreement with labels.
//!
//! M1 is the argmax rating, M2 the expected rating, M3 an out-of-fold ridge probe on a
//! residual-stream site, and M4 a label-free projection onto a steering direction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::SteeringBundle;
use crate::metrics::{expected_rating, spearman_rho, RatingScale};
use crate::model::{forward_with_cache, resolve_position, Component, InterventionPlan, Prompt, Transformer};
use crate::tensor::{dot, Mat};

/// Default ridge penalty grid, searched per fold.
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.1, 1.0, 10.0];
pub const DEFAULT_FOLDS: usize = 5;

/// M1 (argmax rating, ties to the lowest rating) and M2 (expected rating) of one row
/// of final-position logits.
pub fn m1_m2(final_logits: &[f64], scale: &RatingScale) -> Result<(f64, f64)> {
    let p = scale.distribution(final_logits)?;
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    Ok(((best + 1) as f64, expected_rating(final_logits, scale)?))
}

/// M1 and M2 columns over a batch of prompts.
pub fn signal_m1_m2(model: &Transformer, prompts: &[Prompt], scale: &RatingScale) -> Result<(Vec<f64>, Vec<f64>)> {
    let rows: Vec<(f64, f64)> = prompts
        .par_iter()
        .map(|p| {
            let (l, _) = forward_with_cache(model, p, &InterventionPlan::new())?;
            m1_m2(l.row(l.rows - 1), scale)
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().unzip())
}

/// Residual stream right after `site` at the final position, one row per prompt.
pub fn residual_features(model: &Transformer, prompts: &[Prompt], site: Component) -> Result<Mat> {
    let rows: Vec<Vec<f64>> = prompts
        .par_iter()
        .map(|p| {
            let (_, c) = forward_with_cache(model, p, &InterventionPlan::new())?;
            Ok(c.residual_after(site)?.row(c.len - 1).to_vec())
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::InsufficientData("no prompts".into()));
    }
    Ok(Mat::from_rows(&rows))
}

/// Ridge regression with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct Ridge {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl Ridge {
    /// Closed form on centered data: `(Xc^T Xc + lambda I) w = Xc^T yc`.
    pub fn fit(x: &Mat, y: &[f64], lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("ridge lambda must be > 0, got {lambda}")));
        }
        if x.rows != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.rows,
                got: y.len(),
            });
        }
        if x.rows == 0 {
            return Err(Error::InsufficientData("ridge fit on no rows".into()));
        }
        let (n, d) = (x.rows, x.cols);
        let mx: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let my = y.iter().sum::<f64>() / n as f64;
        let xc = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mx[j]);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - my));
        let a = xc.transpose() * &xc + DMatrix::<f64>::identity(d, d) * lambda;
        let b = xc.transpose() * yc;
        let w = a
            .cholesky()
            .ok_or_else(|| Error::NonFinite("ridge normal equations".into()))?
            .solve(&b);
        let weights: Vec<f64> = w.iter().copied().collect();
        Ok(Self {
            intercept: my - dot(&weights, &mx),
            weights,
        })
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.intercept + dot(&self.weights, row)
    }
}

fn rows_of(x: &Mat, idx: &[usize]) -> Mat {
    Mat::from_rows(&idx.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>())
}

/// Seeded fold assignment: a shuffled round-robin over `n` items.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

fn cv_mse(x: &Mat, y: &[f64], folds: usize, lambda: f64, seed: u64) -> Result<f64> {
    let assign = fold_assignment(y.len(), folds, seed);
    let mut se = 0.0;
    for f in 0..folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| assign[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| assign[i] == f).collect();
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let model = Ridge::fit(&rows_of(x, &train), &yt, lambda)?;
        for &i in &test {
            let e = model.predict(x.row(i)) - y[i];
            se += e * e;
        }
    }
    Ok(se / y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    /// Out-of-fold prediction per instance.
    pub predictions: Vec<f64>,
    /// Fold each instance was held out in.
    pub fold_of: Vec<usize>,
    /// Penalty chosen by inner cross-validation for each outer fold.
    pub lambdas: Vec<f64>,
}

/// M3: out-of-fold ridge predictions; each fold's penalty is picked from `lambdas` by an
/// inner cross-validation on that fold's training rows.
pub fn signal_m3_probe(
    features: &Mat,
    labels: &[f64],
    folds: usize,
    lambdas: &[f64],
    seed: u64,
) -> Result<ProbeOutput> {
    if folds < 2 {
        return Err(Error::Config("the probe needs at least 2 folds".into()));
    }
    if lambdas.is_empty() {
        return Err(Error::Config("empty ridge penalty grid".into()));
    }
    if features.rows != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows,
            got: labels.len(),
        });
    }
    if labels.len() < 2 * folds {
        return Err(Error::InsufficientData(format!(
            "{} instances is too few for {folds} folds",
            labels.len()
        )));
    }
    let fold_of = fold_assignment(labels.len(), folds, seed);
    let per_fold: Vec<(Vec<(usize, f64)>, f64)> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
            let xt = rows_of(features, &train);
            let yt: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
            let inner = (folds - 1).max(2);
            let mut best = (f64::INFINITY, lambdas[0]);
            for &l in lambdas {
                let mse = cv_mse(&xt, &yt, inner, l, seed ^ (f as u64 + 1))?;
                if mse < best.0 {
                    best = (mse, l);
                }
            }
            let model = Ridge::fit(&xt, &yt, best.1)?;
            let preds = (0..labels.len())
                .filter(|&i| fold_of[i] == f)
                .map(|i| (i, model.predict(features.row(i))))
                .collect();
            Ok((preds, best.1))
        })
        .collect::<Result<_>>()?;
    let mut predictions = vec![f64::NAN; labels.len()];
    let mut chosen = Vec::with_capacity(folds);
    for (preds, l) in per_fold {
        for (i, p) in preds {
            predictions[i] = p;
        }
        chosen.push(l);
    }
    Ok(ProbeOutput {
        predictions,
        fold_of,
        lambdas: chosen,
    })
}

/// Raw M4 readout: mean over hooks of the hook output projected on the unit steering
/// vector. `acts[i][h]` is instance `i`'s output at hook `h`.
pub fn m4_projection(acts: &[Vec<Vec<f64>>], bundle: &SteeringBundle) -> Result<Vec<f64>> {
    let units: Vec<Vec<f64>> = bundle
        .hooks
        .iter()
        .map(|h| {
            if h.norm == 0.0 || !h.norm.is_finite() {
                return Err(Error::Undefined(format!("zero-norm steering direction at {}", h.node)));
            }
            Ok(h.vector.iter().map(|x| x / h.norm).collect())
        })
        .collect::<Result<_>>()?;
    acts.iter()
        .map(|row| {
            if row.len() != units.len() {
                return Err(Error::DimensionMismatch {
                    expected: units.len(),
                    got: row.len(),
                });
            }
            Ok(row.iter().zip(&units).map(|(a, u)| dot(a, u)).sum::<f64>() / units.len() as f64)
        })
        .collect()
}

/// Flip `raw` if that makes its Spearman correlation with `calibration` nonnegative.
/// Returns the sign applied.
pub fn calibrate_sign(raw: &mut [f64], calibration: &[f64]) -> Result<f64> {
    let rho = match spearman_rho(raw, calibration) {
        Ok(r) => r,
        Err(Error::Undefined(_)) => return Ok(1.0),
        Err(e) => return Err(e),
    };
    if rho < 0.0 {
        raw.iter_mut().for_each(|x| *x = -*x);
        return Ok(-1.0);
    }
    Ok(1.0)
}

/// M4 over a batch of prompts, sign-calibrated against `calibration` (typically M2).
pub fn signal_m4_direction(
    model: &Transformer,
    prompts: &[Prompt],
    bundle: &SteeringBundle,
    calibration: &[f64],
) -> Result<Vec<f64>> {
    let acts: Vec<Vec<Vec<f64>>> = prompts
        .par_iter()
        .map(|p| {
            let (_, c) = forward_with_cache(model, p, &InterventionPlan::new())?;
            bundle
                .hooks
                .iter()
                .map(|h| {
                    resolve_position(h.node.position, c.len)?;
                    Ok(c.node_output(h.node)?.to_vec())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut m4 = m4_projection(&acts, bundle)?;
    calibrate_sign(&mut m4, calibration)?;
    Ok(m4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTable {
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
    pub m4: Vec<f64>,
}

impl SignalTable {
    pub fn new(m1: Vec<f64>, m2: Vec<f64>, m3: Vec<f64>, m4: Vec<f64>) -> Result<Self> {
        let n = m1.len();
        for c in [&m2, &m3, &m4] {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
        }
        Ok(Self { m1, m2, m3, m4 })
    }

    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }

    pub fn columns(&self) -> [(&'static str, &[f64]); 4] {
        [("m1", &self.m1), ("m2", &self.m2), ("m3", &self.m3), ("m4", &self.m4)]
    }

    /// Per-instance rows `index,label,m1,m2,m3,m4`, then a blank line and a
    /// `signal,rho` footer (`undefined` where the correlation does not exist).
    pub fn write_csv<W: Write>(&self, labels: &[f64], w: W) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: labels.len(),
            });
        }
        let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        wr.write_record(["index", "label", "m1", "m2", "m3", "m4"])?;
        for i in 0..self.len() {
            let row = [
                i.to_string(),
                labels[i].to_string(),
                self.m1[i].to_string(),
                self.m2[i].to_string(),
                self.m3[i].to_string(),
                self.m4[i].to_string(),
            ];
            wr.write_record(&row)?;
        }
        wr.write_record([""])?;
        wr.write_record(["signal", "rho"])?;
        for (name, col) in self.columns() {
            let rho = spearman_rho(col, labels)
                .map(|r| r.to_string())
                .unwrap_or_else(|_| "undefined".into());
            wr.write_record([name, rho.as_str()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Spearman correlation of each signal (M1..M4) with the labels.
pub fn correlate(table: &SignalTable, labels: &[f64]) -> Result<[f64; 4]> {
    if labels.len() != table.len() {
        return Err(Error::DimensionMismatch {
            expected: table.len(),
            got: labels.len(),
        });
    }
    let c = table.columns();
    Ok([
        spearman_rho(c[0].1, labels)?,
        spearman_rho(c[1].1, labels)?,
        spearman_rho(c[2].1, labels)?,
        spearman_rho(c[3].1, labels)?,
    ])
}
