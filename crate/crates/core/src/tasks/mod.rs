// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic judgment tasks.
//!
//! Prompts are `[BOS, content.., suffix, ANCHOR]`. The rating of a prompt is the
//! bucketed fraction of positive content tokens; the rating format answers with a
//! rating token, the classification format with Yes/No on the same content. A separate
//! knowledge probe checks memorized key/value pairs with disjoint tokens.

mod pairs;
mod train;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{LabelSet, RatingScale};

pub use pairs::{build_minimal_pairs, reformat, right_align, MinimalPair, RightAlignment};
pub use train::{evaluate_accuracy, train, TrainConfig, TrainReport};

pub const BOS: u32 = 0;
pub const RATE_SUFFIX: u32 = 1;
pub const CLASS_SUFFIX: u32 = 2;
pub const KNOW_INSTR: u32 = 3;
pub const ANCHOR: u32 = 4;
/// Rating token for rating 1; ratings occupy `RATING_BASE..RATING_BASE + scale_size`.
pub const RATING_BASE: u32 = 5;

/// Output format of a judgment prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Rating,
    Classification,
}

/// Which task an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Rating,
    Classification,
    Knowledge,
}

impl From<Format> for TaskKind {
    fn from(f: Format) -> Self {
        match f {
            Format::Rating => TaskKind::Rating,
            Format::Classification => TaskKind::Classification,
        }
    }
}

/// Sizes of the token pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_neutral: usize,
    /// Number of knowledge keys (and values).
    pub n_knowledge: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self {
            n_positive: 16,
            n_negative: 16,
            n_neutral: 8,
            n_knowledge: 16,
        }
    }
}

/// Task configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub vocab: VocabLayout,
    pub content_len: usize,
    pub scale_size: usize,
    /// Probability that a non-positive content slot is neutral rather than negative.
    pub neutral_rate: f64,
    pub format: Format,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: VocabLayout::default(),
            content_len: 8,
            scale_size: 5,
            neutral_rate: 0.25,
            format: Format::Rating,
        }
    }
}

impl TaskSpec {
    pub fn with_format(&self, format: Format) -> Self {
        Self { format, ..self.clone() }
    }

    pub fn yes(&self) -> u32 {
        RATING_BASE + self.scale_size as u32
    }

    pub fn no(&self) -> u32 {
        self.yes() + 1
    }

    fn pool_start(&self) -> u32 {
        self.no() + 1
    }

    pub fn positive_pool(&self) -> std::ops::Range<u32> {
        let s = self.pool_start();
        s..s + self.vocab.n_positive as u32
    }

    pub fn negative_pool(&self) -> std::ops::Range<u32> {
        let s = self.positive_pool().end;
        s..s + self.vocab.n_negative as u32
    }

    pub fn neutral_pool(&self) -> std::ops::Range<u32> {
        let s = self.negative_pool().end;
        s..s + self.vocab.n_neutral as u32
    }

    pub fn knowledge_keys(&self) -> std::ops::Range<u32> {
        let s = self.neutral_pool().end;
        s..s + self.vocab.n_knowledge as u32
    }

    pub fn knowledge_values(&self) -> std::ops::Range<u32> {
        let s = self.knowledge_keys().end;
        s..s + self.vocab.n_knowledge as u32
    }

    pub fn vocab_size(&self) -> usize {
        self.knowledge_values().end as usize
    }

    /// Judgment prompt length: BOS + content + suffix + anchor.
    pub fn prompt_len(&self) -> usize {
        self.content_len + 3
    }

    pub fn rating_scale(&self) -> RatingScale {
        RatingScale {
            tokens: (0..self.scale_size as u32).map(|i| RATING_BASE + i).collect(),
        }
    }

    /// Yes/No as a two-point scale (No = 1, Yes = 2): the classification-format metric.
    pub fn binary_scale(&self) -> RatingScale {
        RatingScale {
            tokens: vec![self.no(), self.yes()],
        }
    }

    pub fn labels(&self) -> LabelSet {
        LabelSet {
            positive: vec![self.yes()],
            negative: vec![self.no()],
        }
    }

    /// Metric for a judgment format.
    pub fn metric(&self, format: Format) -> RatingScale {
        match format {
            Format::Rating => self.rating_scale(),
            Format::Classification => self.binary_scale(),
        }
    }

    pub fn suffix(format: Format) -> u32 {
        match format {
            Format::Rating => RATE_SUFFIX,
            Format::Classification => CLASS_SUFFIX,
        }
    }

    pub fn is_content(&self, tok: u32) -> bool {
        self.positive_pool().contains(&tok) || self.negative_pool().contains(&tok) || self.neutral_pool().contains(&tok)
    }

    /// Rating rule: `min(s, 1 + floor(s * c / n))` for `c` positive tokens out of `n`.
    pub fn rating_of_count(&self, positives: usize) -> u8 {
        let s = self.scale_size;
        (1 + (s * positives) / self.content_len).min(s) as u8
    }

    /// Recompute the rating of a judgment prompt from its content.
    pub fn rating_of(&self, tokens: &[u32]) -> Result<u8> {
        if tokens.len() != self.prompt_len() {
            return Err(Error::Config(format!(
                "judgment prompt must have length {}",
                self.prompt_len()
            )));
        }
        let content = &tokens[1..1 + self.content_len];
        let pos = self.positive_pool();
        Ok(self.rating_of_count(content.iter().filter(|t| pos.contains(t)).count()))
    }

    /// Target token of a judgment prompt with a given rating in a given format.
    pub fn target(&self, rating: u8, format: Format) -> Result<u32> {
        match format {
            Format::Rating => Ok(RATING_BASE + rating as u32 - 1),
            Format::Classification => {
                if 2 * rating as usize == self.scale_size + 1 {
                    return Err(Error::Config("the scale midpoint has no Yes/No label".into()));
                }
                Ok(if 2 * (rating as usize) > self.scale_size + 1 {
                    self.yes()
                } else {
                    self.no()
                })
            }
        }
    }

    /// Ratings a generated dataset covers for a format.
    pub fn ratings_for(&self, format: Format) -> Vec<u8> {
        let all = 1..=self.scale_size as u8;
        match format {
            Format::Rating => all.collect(),
            Format::Classification => all.filter(|&r| 2 * r as usize != self.scale_size + 1).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_size < 2 {
            return Err(Error::Config("scale_size must be >= 2".into()));
        }
        if self.content_len == 0 {
            return Err(Error::Config("content_len must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.neutral_rate) {
            return Err(Error::Config("neutral_rate must be in [0, 1]".into()));
        }
        let v = &self.vocab;
        if v.n_positive == 0 || v.n_negative == 0 {
            return Err(Error::Config("positive and negative pools must be nonempty".into()));
        }
        if self.neutral_rate > 0.0 && v.n_neutral == 0 {
            return Err(Error::Config("neutral_rate > 0 needs a nonempty neutral pool".into()));
        }
        for r in 1..=self.scale_size as u8 {
            if !(0..=self.content_len).any(|c| self.rating_of_count(c) == r) {
                return Err(Error::Config(format!(
                    "rating {r} is unreachable with content length {}",
                    self.content_len
                )));
            }
        }
        Ok(())
    }
}

/// One prompt with its answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target: u32,
    pub rating: Option<u8>,
    pub task: TaskKind,
}

/// Judgment dataset, exactly stratified across the format's ratings.
pub fn generate_task(spec: &TaskSpec, seed: u64, n: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratings = spec.ratings_for(spec.format);
    let counts_for: Vec<Vec<usize>> = ratings
        .iter()
        .map(|&r| {
            (0..=spec.content_len)
                .filter(|&c| spec.rating_of_count(c) == r)
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).map(|i| i % ratings.len()).collect();
    order.shuffle(&mut rng);
    let (pos, neg, neu) = (spec.positive_pool(), spec.negative_pool(), spec.neutral_pool());
    let mut out = Vec::with_capacity(n);
    for which in order {
        let counts = &counts_for[which];
        let c = counts[rng.random_range(0..counts.len())];
        let mut content: Vec<u32> = (0..spec.content_len)
            .map(|i| {
                if i < c {
                    rng.random_range(pos.clone())
                } else if rng.random_bool(spec.neutral_rate) {
                    rng.random_range(neu.clone())
                } else {
                    rng.random_range(neg.clone())
                }
            })
            .collect();
        content.shuffle(&mut rng);
        let rating = ratings[which];
        let mut tokens = Vec::with_capacity(spec.prompt_len());
        tokens.push(BOS);
        tokens.extend(content);
        tokens.push(TaskSpec::suffix(spec.format));
        tokens.push(ANCHOR);
        out.push(Example {
            target: spec.target(rating, spec.format)?,
            tokens,
            rating: Some(rating),
            task: spec.format.into(),
        });
    }
    Ok(out)
}

/// Memorized key -> value bijection, verified with Yes/No prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeProbe {
    /// `(key, value)` pairs; keys and values are each distinct.
    pub pairs: Vec<(u32, u32)>,
    pub yes: u32,
    pub no: u32,
}

impl KnowledgeProbe {
    pub fn new(spec: &TaskSpec, seed: u64) -> Result<Self> {
        if spec.vocab.n_knowledge < 2 {
            return Err(Error::Config("knowledge probe needs at least 2 keys".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<u32> = spec.knowledge_values().collect();
        values.shuffle(&mut rng);
        Ok(Self {
            pairs: spec.knowledge_keys().zip(values).collect(),
            yes: spec.yes(),
            no: spec.no(),
        })
    }

    pub fn value_of(&self, key: u32) -> Option<u32> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    pub fn prompt(key: u32, value: u32) -> Vec<u32> {
        vec![BOS, KNOW_INSTR, key, value, ANCHOR]
    }

    /// `n` verification prompts, alternating true and false proposals.
    pub fn generate(&self, seed: u64, n: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (key, value) = self.pairs[rng.random_range(0..self.pairs.len())];
                let (proposed, target) = if i % 2 == 0 {
                    (value, self.yes)
                } else {
                    let mut other = value;
                    while other == value {
                        other = self.pairs[rng.random_range(0..self.pairs.len())].1;
                    }
                    (other, self.no)
                };
                Example {
                    tokens: Self::prompt(key, proposed),
                    target,
                    rating: None,
                    task: TaskKind::Knowledge,
                }
            })
            .collect()
    }

    /// Every key with its true value and with one seeded wrong value.
    pub fn evaluation_set(&self, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(2 * self.pairs.len());
        for (i, &(key, value)) in self.pairs.iter().enumerate() {
            out.push(Example {
                tokens: Self::prompt(key, value),
                target: self.yes,
                rating: None,
                task: TaskKind::Knowledge,
            });
            let shift = rng.random_range(1..self.pairs.len());
            let wrong = self.pairs[(i + shift) % self.pairs.len()].1;
            out.push(Example {
                tokens: Self::prompt(key, wrong),
                target: self.no,
                rating: None,
                task: TaskKind::Knowledge,
            });
        }
        out
    }
}

/// Derive independent sub-seeds from a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn every_rating_reachable_and_rule_boundaries() {
        let s = TaskSpec::default();
        s.validate().unwrap();
        assert_eq!(s.rating_of_count(8), 5);
        assert_eq!(s.rating_of_count(0), 1);
        assert_eq!(s.rating_of_count(4), 3);
        let short = TaskSpec {
            content_len: 3,
            ..TaskSpec::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn all_positive_content_rates_five() {
        let s = TaskSpec::default();
        let mut t = vec![BOS];
        t.extend(std::iter::repeat(s.positive_pool().start).take(8));
        t.extend([RATE_SUFFIX, ANCHOR]);
        assert_eq!(s.rating_of(&t).unwrap(), 5);
        assert_eq!(s.target(5, Format::Rating).unwrap(), RATING_BASE + 4);
    }

    #[test]
    fn generation_is_seeded_stratified_and_follows_the_rule() {
        let s = TaskSpec::default();
        let a = generate_task(&s, 11, 10_000).unwrap();
        assert_eq!(a, generate_task(&s, 11, 10_000).unwrap());
        let mut hist = [0usize; 5];
        for e in &a {
            let r = s.rating_of(&e.tokens).unwrap();
            assert_eq!(Some(r), e.rating);
            assert_eq!(e.target, s.target(r, Format::Rating).unwrap());
            hist[r as usize - 1] += 1;
        }
        for h in hist {
            assert!((h as f64 / 10_000.0 - 0.2).abs() <= 0.05);
        }
        let c = generate_task(&s.with_format(Format::Classification), 3, 400).unwrap();
        assert!(c.iter().all(|e| e.rating != Some(3)));
        assert!(c.iter().all(|e| (e.target == s.yes()) == (e.rating.unwrap() >= 4)));
    }

    #[test]
    fn knowledge_is_a_bijection_on_disjoint_tokens() {
        let s = TaskSpec::default();
        let k = KnowledgeProbe::new(&s, 5).unwrap();
        let keys: BTreeSet<u32> = k.pairs.iter().map(|p| p.0).collect();
        let vals: BTreeSet<u32> = k.pairs.iter().map(|p| p.1).collect();
        assert_eq!(keys.len(), k.pairs.len());
        assert_eq!(vals.len(), k.pairs.len());
        for t in keys.iter().chain(&vals) {
            assert!(!s.is_content(*t));
        }
        for e in k.evaluation_set(1) {
            let truth = k.value_of(e.tokens[2]).unwrap() == e.tokens[3];
            assert_eq!(truth, e.target == s.yes());
        }
        assert_eq!(s.vocab_size(), 12 + 16 + 16 + 8 + 32);
    }
}
