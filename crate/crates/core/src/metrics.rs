// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar judgment metrics over final-position logits, and rank statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::softmax;

/// Differentiable scalar of the final-position logits.
pub trait Metric: Sync {
    fn value(&self, final_logits: &[f64]) -> Result<f64>;
    fn gradient(&self, final_logits: &[f64]) -> Result<Vec<f64>>;
}

/// Ordered rating tokens; token `i` stands for rating `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingScale {
    pub tokens: Vec<u32>,
}

impl RatingScale {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::Config("a rating scale needs at least 2 tokens".into()));
        }
        let mut sorted = tokens.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != tokens.len() {
            return Err(Error::Config("rating tokens must be distinct".into()));
        }
        Ok(Self { tokens })
    }

    /// Upper bound `s` of the scale.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Distribution over ratings, renormalized over the rating tokens.
    pub fn distribution(&self, final_logits: &[f64]) -> Result<Vec<f64>> {
        check_logits(final_logits, &self.tokens)?;
        let sub: Vec<f64> = self.tokens.iter().map(|&t| final_logits[t as usize]).collect();
        if sub.iter().all(|x| *x == f64::NEG_INFINITY) {
            return Err(Error::NonFinite("all rating logits are -inf".into()));
        }
        Ok(softmax(&sub))
    }
}

fn check_logits(logits: &[f64], tokens: &[u32]) -> Result<()> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= logits.len()) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab_size: logits.len(),
        });
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// `EV = sum_r r * P(r)` over the rating-token softmax.
pub fn expected_rating(final_logits: &[f64], scale: &RatingScale) -> Result<f64> {
    let p = scale.distribution(final_logits)?;
    Ok(p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum())
}

impl Metric for RatingScale {
    fn value(&self, final_logits: &[f64]) -> Result<f64> {
        expected_rating(final_logits, self)
    }

    /// `dEV/dl_t = p_t (r_t - EV)` on rating tokens, zero elsewhere.
    fn gradient(&self, final_logits: &[f64]) -> Result<Vec<f64>> {
        let p = self.distribution(final_logits)?;
        let ev: f64 = p.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum();
        let mut g = vec![0.0; final_logits.len()];
        for (i, (&t, &pi)) in self.tokens.iter().zip(&p).enumerate() {
            g[t as usize] = pi * ((i + 1) as f64 - ev);
        }
        Ok(g)
    }
}

/// A metric that ignores its input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantMetric(pub f64);

impl Metric for ConstantMetric {
    fn value(&self, _: &[f64]) -> Result<f64> {
        Ok(self.0)
    }

    fn gradient(&self, final_logits: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; final_logits.len()])
    }
}

/// `sign(ev_clean - ev_corr)`; a zero gap means the pair must be excluded.
pub fn polarity(ev_clean: f64, ev_corr: f64) -> Result<f64> {
    let gap = ev_clean - ev_corr;
    if !gap.is_finite() {
        return Err(Error::NonFinite("EV gap".into()));
    }
    if gap == 0.0 {
        return Err(Error::DegeneratePair {
            gap: 0.0,
            threshold: 0.0,
        });
    }
    Ok(gap.signum())
}

/// Classification targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

impl LabelSet {
    pub fn new(positive: Vec<u32>, negative: Vec<u32>) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::Config("label sets must be nonempty".into()));
        }
        if positive.iter().any(|p| negative.contains(p)) {
            return Err(Error::Config("positive and negative labels overlap".into()));
        }
        Ok(Self { positive, negative })
    }

    /// All label tokens, positives first.
    pub fn all(&self) -> impl Iterator<Item = u32> + '_ {
        self.positive.iter().chain(&self.negative).copied()
    }

    pub fn is_positive(&self, token: u32) -> bool {
        self.positive.contains(&token)
    }
}

/// Full-vocabulary probabilities of each label token plus the winning label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelReadout {
    /// `(token, probability)` in [`LabelSet::all`] order.
    pub probs: Vec<(u32, f64)>,
    pub argmax: u32,
    /// Total probability of the positive labels.
    pub positive_mass: f64,
}

impl LabelReadout {
    pub fn prob(&self, token: u32) -> Option<f64> {
        self.probs.iter().find(|(t, _)| *t == token).map(|(_, p)| *p)
    }
}

/// Label probabilities from the full-vocabulary softmax; argmax over label tokens with
/// ties going to the lowest token id.
pub fn label_probability(final_logits: &[f64], labels: &LabelSet) -> Result<LabelReadout> {
    let all: Vec<u32> = labels.all().collect();
    check_logits(final_logits, &all)?;
    let p = softmax(final_logits);
    let probs: Vec<(u32, f64)> = all.iter().map(|&t| (t, p[t as usize])).collect();
    let argmax = argmax_token(final_logits, &all);
    let positive_mass = labels.positive.iter().map(|&t| p[t as usize]).sum();
    Ok(LabelReadout {
        probs,
        argmax,
        positive_mass,
    })
}

/// Token among `candidates` with the highest logit; ties go to the lowest id.
pub fn argmax_token(logits: &[f64], candidates: &[u32]) -> u32 {
    let mut best = candidates[0];
    for &t in &candidates[1..] {
        let (lt, lb) = (logits[t as usize], logits[best as usize]);
        if lt > lb || (lt == lb && t < best) {
            best = t;
        }
    }
    best
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData("spearman needs at least 2 points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
        .ok_or_else(|| Error::Undefined("spearman: zero variance input".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const NEG: f64 = f64::NEG_INFINITY;

    fn scale() -> RatingScale {
        RatingScale::new(vec![1, 2, 3, 4, 5]).unwrap()
    }

    #[test]
    fn ev_examples() {
        let mut l = vec![0.0; 8];
        l[5] = 50.0;
        assert!((expected_rating(&l, &scale()).unwrap() - 5.0).abs() < 1e-12);
        let l = vec![0.3; 8];
        assert_eq!(expected_rating(&l, &scale()).unwrap(), 3.0);
        let mut l = vec![NEG; 8];
        l[1] = 0.0;
        l[5] = 0.0;
        assert_eq!(expected_rating(&l, &scale()).unwrap(), 3.0);
        l[1] = 1.0f64.ln();
        l[5] = 3.0f64.ln();
        assert!((expected_rating(&l, &scale()).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn ev_gradient_at_a_point_mass_is_zero() {
        // p = e_5 gives p_t (r_t - EV) = 0 for every t; the Jacobian row collapses.
        let mut l = vec![NEG; 7];
        l[5] = 0.0;
        l[1] = -800.0;
        let g = scale().gradient(&l).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn polarity_is_antisymmetric() {
        assert_eq!(polarity(4.2, 1.8).unwrap(), 1.0);
        assert_eq!(polarity(1.8, 4.2).unwrap(), -1.0);
        assert!(matches!(polarity(3.0, 3.0), Err(Error::DegeneratePair { .. })));
    }

    #[test]
    fn label_readouts() {
        let labels = LabelSet::new(vec![3], vec![7]).unwrap();
        let mut l = vec![0.0; 9];
        l[3] = 1000.0;
        let r = label_probability(&l, &labels).unwrap();
        assert_eq!(r.argmax, 3);
        assert!((r.prob(3).unwrap() - 1.0).abs() < 1e-12);

        let mut l = vec![NEG; 9];
        l[3] = 0.0;
        l[7] = 0.0;
        let r = label_probability(&l, &labels).unwrap();
        assert_eq!(r.prob(3), Some(0.5));
        assert_eq!(r.argmax, 3);
        let flipped = LabelSet::new(vec![7], vec![3]).unwrap();
        assert_eq!(label_probability(&l, &flipped).unwrap().argmax, 3);

        let three = LabelSet::new(vec![0], vec![1, 2]).unwrap();
        let mut l = vec![NEG; 5];
        l[0] = 2.0f64.ln();
        l[1] = 0.0;
        l[2] = 0.0;
        let r = label_probability(&l, &three).unwrap();
        let p: Vec<f64> = r.probs.iter().map(|x| x.1).collect();
        for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman_rho(&x, &x).unwrap(), 1.0);
        assert_eq!(spearman_rho(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(spearman_rho(&x, &[1.0; 4]), Err(Error::Undefined(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn scale_validation() {
        assert!(RatingScale::new(vec![1]).is_err());
        assert!(RatingScale::new(vec![1, 1]).is_err());
        assert!(LabelSet::new(vec![1], vec![1]).is_err());
        assert!(LabelSet::new(vec![], vec![1]).is_err());
    }
}
