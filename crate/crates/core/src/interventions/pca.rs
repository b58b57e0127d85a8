// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Mat};

const MAX_ITERS: usize = 100_000;

/// First principal direction of the rows of `x` (column-centered), by power iteration
/// on the covariance. Sign fixed so the largest-magnitude entry is positive.
pub fn pc1(x: &Mat) -> Result<Vec<f64>> {
    if x.rows < 2 {
        return Err(Error::InsufficientData("PC1 needs at least 2 rows".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("PC1 input".into()));
    }
    let (n, d) = (x.rows, x.cols);
    let mut c = x.clone();
    for j in 0..d {
        let mu = (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            c.set(i, j, x.get(i, j) - mu);
        }
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r = c.row(i);
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if trace <= 1e-300 {
        return Err(Error::Undefined(
            "rank-deficient input: zero variance after centering".into(),
        ));
    }
    let start = (0..d)
        .max_by(|&a, &b| cov[a * d + a].total_cmp(&cov[b * d + b]))
        .unwrap_or(0);
    // Start from the dominant covariance column, which cannot be orthogonal to PC1 unless
    // the column is zero.
    let mut v: Vec<f64> = cov[start * d..(start + 1) * d].to_vec();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut w = vec![0.0; d];
    for _ in 0..MAX_ITERS {
        for a in 0..d {
            w[a] = dot(&cov[a * d..(a + 1) * d], &v);
        }
        let nw = norm(&w);
        if nw == 0.0 {
            return Err(Error::Undefined("power iteration collapsed".into()));
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let delta: f64 = v.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut w);
        if delta < 1e-14 {
            break;
        }
    }
    let lead = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(v)
}

/// Pairwise `|cos|` between the PC1 directions of several difference matrices.
pub fn pc1_overlap(task_diffs: &[Mat]) -> Result<Vec<Vec<f64>>> {
    if task_diffs.len() < 2 {
        return Err(Error::InsufficientData("PC1 overlap needs at least 2 tasks".into()));
    }
    let dirs: Vec<Vec<f64>> = task_diffs.iter().map(pc1).collect::<Result<_>>()?;
    if dirs.iter().any(|v| v.len() != dirs[0].len()) {
        return Err(Error::DimensionMismatch {
            expected: dirs[0].len(),
            got: dirs.iter().map(|v| v.len()).find(|&l| l != dirs[0].len()).unwrap_or(0),
        });
    }
    Ok(dirs
        .iter()
        .map(|a| dirs.iter().map(|b| dot(a, b).abs().min(1.0)).collect())
        .collect())
}
