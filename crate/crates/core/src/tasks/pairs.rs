// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Format, TaskKind, TaskSpec, CLASS_SUFFIX, RATE_SUFFIX};
use crate::error::{Error, Result};

/// Length-matched clean/corrupted prompts with opposed ratings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub clean: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub clean_rating: u8,
    pub corrupt_rating: u8,
    pub format: Format,
}

impl MinimalPair {
    /// Ground-truth polarity `sign(clean_rating - corrupt_rating)`.
    pub fn polarity(&self) -> f64 {
        if self.clean_rating > self.corrupt_rating {
            1.0
        } else {
            -1.0
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Positions where the two prompts differ.
    pub fn diff_positions(&self) -> Vec<usize> {
        self.clean
            .iter()
            .zip(&self.corrupt)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Pair high-rated (>= 4) with low-rated (<= 2) prompts of the same format.
///
/// Both buckets are shuffled with `seed` and zipped; even pairs put the high prompt on
/// the clean side and odd pairs the low one, so the polarities balance to within one.
pub fn build_minimal_pairs(dataset: &[Example], seed: u64) -> Result<Vec<MinimalPair>> {
    let format = match dataset.iter().find(|e| e.task != TaskKind::Knowledge) {
        Some(e) if e.task == TaskKind::Rating => Format::Rating,
        Some(_) => Format::Classification,
        None => return Err(Error::InsufficientData("no judgment examples".into())),
    };
    let want: TaskKind = format.into();
    let mut high = Vec::new();
    let mut low = Vec::new();
    for e in dataset.iter().filter(|e| e.task == want) {
        match e.rating {
            Some(r) if r >= 4 => high.push(e),
            Some(r) if r <= 2 => low.push(e),
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    high.shuffle(&mut rng);
    low.shuffle(&mut rng);
    let n = high.len().min(low.len());
    if n == 0 {
        return Err(Error::InsufficientData(
            "need examples rated >= 4 and <= 2 to build opposed pairs".into(),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (i, (h, l)) in high.into_iter().zip(low).enumerate() {
        if h.tokens.len() != l.tokens.len() {
            return Err(Error::Config("paired prompts differ in length".into()));
        }
        let (c, k) = if i % 2 == 0 { (h, l) } else { (l, h) };
        out.push(MinimalPair {
            clean: c.tokens.clone(),
            corrupt: k.tokens.clone(),
            clean_rating: c.rating.expect("judgment rating"),
            corrupt_rating: k.rating.expect("judgment rating"),
            format,
        });
    }
    Ok(out)
}

/// The same pair in another output format (only the instruction suffix changes).
pub fn reformat(pair: &MinimalPair, format: Format, spec: &TaskSpec) -> Result<MinimalPair> {
    let suffix_at = spec.prompt_len() - 2;
    if pair.len() != spec.prompt_len() {
        return Err(Error::Config("pair does not match the task layout".into()));
    }
    let swap = |t: &[u32]| -> Result<Vec<u32>> {
        let mut t = t.to_vec();
        if t[suffix_at] != RATE_SUFFIX && t[suffix_at] != CLASS_SUFFIX {
            return Err(Error::Config("no format suffix in prompt".into()));
        }
        t[suffix_at] = TaskSpec::suffix(format);
        Ok(t)
    };
    for r in [pair.clean_rating, pair.corrupt_rating] {
        spec.target(r, format)?;
    }
    Ok(MinimalPair {
        clean: swap(&pair.clean)?,
        corrupt: swap(&pair.corrupt)?,
        format,
        ..pair.clone()
    })
}

/// Right-aligned position map for one prompt length: the last token is `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RightAlignment {
    pub len: usize,
}

impl RightAlignment {
    pub fn to_relative(&self, t: usize) -> i64 {
        t as i64 - self.len as i64
    }

    pub fn to_absolute(&self, i: i64) -> Result<usize> {
        crate::model::resolve_position(i, self.len)
    }
}

/// Right-aligned position maps for a batch of pairs.
pub fn right_align(pairs: &[MinimalPair]) -> Vec<RightAlignment> {
    pairs.iter().map(|p| RightAlignment { len: p.len() }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::generate_task;

    #[test]
    fn balanced_pairs_differ_only_in_content() {
        let spec = TaskSpec::default();
        let data = generate_task(&spec, 2, 500).unwrap();
        let pairs = build_minimal_pairs(&data, 9).unwrap();
        let plus = pairs.iter().filter(|p| p.polarity() > 0.0).count();
        assert!((2 * plus as i64 - pairs.len() as i64).abs() <= 1);
        for p in &pairs {
            assert_eq!(p.clean.len(), p.corrupt.len());
            for t in p.diff_positions() {
                assert!(spec.is_content(p.clean[t]) && spec.is_content(p.corrupt[t]));
            }
            assert_eq!(spec.rating_of(&p.clean).unwrap(), p.clean_rating);
        }
    }

    #[test]
    fn hundred_items_make_fifty_balanced_pairs() {
        let spec = TaskSpec::default();
        let data: Vec<Example> = generate_task(&spec, 4, 2000)
            .unwrap()
            .into_iter()
            .filter(|e| e.rating != Some(3))
            .collect();
        let hi: Vec<_> = data
            .iter()
            .filter(|e| e.rating.unwrap() >= 4)
            .take(50)
            .cloned()
            .collect();
        let lo: Vec<_> = data
            .iter()
            .filter(|e| e.rating.unwrap() <= 2)
            .take(50)
            .cloned()
            .collect();
        let pairs = build_minimal_pairs(&[hi, lo].concat(), 1).unwrap();
        assert_eq!(pairs.len(), 50);
        assert_eq!(pairs.iter().filter(|p| p.polarity() > 0.0).count(), 25);
    }

    #[test]
    fn only_midpoint_items_is_an_error() {
        let spec = TaskSpec::default();
        let data: Vec<Example> = generate_task(&spec, 4, 200)
            .unwrap()
            .into_iter()
            .filter(|e| e.rating == Some(3))
            .collect();
        assert!(matches!(build_minimal_pairs(&data, 1), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn reformat_changes_only_the_suffix() {
        let spec = TaskSpec::default();
        let pairs = build_minimal_pairs(&generate_task(&spec, 2, 100).unwrap(), 9).unwrap();
        let c = reformat(&pairs[0], Format::Classification, &spec).unwrap();
        assert_eq!(c.diff_positions(), pairs[0].diff_positions());
        assert_eq!(c.clean[spec.prompt_len() - 2], CLASS_SUFFIX);
    }

    #[test]
    fn right_alignment_round_trips() {
        let a = RightAlignment { len: 20 };
        assert_eq!(a.to_relative(19), -1);
        assert_eq!(a.to_relative(0), -20);
        let b = RightAlignment { len: 18 };
        assert_eq!(a.to_relative(19), b.to_relative(17));
        for t in 0..20 {
            assert_eq!(a.to_absolute(a.to_relative(t)).unwrap(), t);
        }
    }
}
