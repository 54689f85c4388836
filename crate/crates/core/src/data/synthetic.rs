//! Synthetic sequence-transduction domains.
//!
//! All tasks draw sources from the same distribution: a length uniform in
//! `[min_len, max_len]`, then tokens uniform over the content range. Only the
//! source→target mapping differs, so a model cannot tell domains apart from
//! the input alone.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DomainDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Adds `k` to every token, wrapping within the content range.
    Shift(usize),
    Sort,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Copy => f.write_str("copy"),
            TaskKind::Reverse => f.write_str("reverse"),
            TaskKind::Shift(k) => write!(f, "shift({k})"),
            TaskKind::Sort => f.write_str("sort"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "copy" => return Ok(TaskKind::Copy),
            "reverse" => return Ok(TaskKind::Reverse),
            "sort" => return Ok(TaskKind::Sort),
            _ => {}
        }
        s.strip_prefix("shift(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.trim().parse().ok())
            .map(TaskKind::Shift)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

impl Serialize for TaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl TaskKind {
    /// Target for `src`; content tokens are in `[lo, hi)`.
    pub fn apply(&self, src: &[usize], lo: usize, hi: usize) -> Vec<usize> {
        match *self {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Shift(k) => {
                let n = hi - lo;
                src.iter().map(|&t| lo + (t - lo + k) % n).collect()
            }
            TaskKind::Sort => {
                let mut v = src.to_vec();
                v.sort_unstable();
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// First content token id (inclusive).
    pub content_lo: usize,
    /// End of the content range (exclusive).
    pub content_hi: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.content_lo >= self.content_hi {
            return Err(Error::Config(format!(
                "empty content range [{}, {})",
                self.content_lo, self.content_hi
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("bad length range [{}, {}]", self.min_len, self.max_len)));
        }
        Ok(())
    }

    pub fn sample_source(&self, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len).map(|_| rng.random_range(self.content_lo..self.content_hi)).collect()
    }

    pub fn target(&self, src: &[usize]) -> Vec<usize> {
        self.kind.apply(src, self.content_lo, self.content_hi)
    }
}

/// `n_pairs` source/target pairs from `task`, deterministic in `task.seed`.
pub fn gen_domain(domain_id: &str, task: &SyntheticTask, n_pairs: usize) -> Result<DomainDataset> {
    task.validate()?;
    if n_pairs == 0 {
        return Err(Error::Config("n_pairs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let pairs = (0..n_pairs)
        .map(|_| {
            let src = task.sample_source(&mut rng);
            let tgt = task.target(&src);
            (src, tgt)
        })
        .collect();
    DomainDataset::new(domain_id, pairs)
}
