use serde::{Deserialize, Serialize};

use super::dataset::Pair;
use crate::error::{Error, Result};

/// Length cap and source/target length-ratio bounds for corpus cleaning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub max_len: usize,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            max_len: 250,
            min_ratio: 0.67,
            max_ratio: 1.5,
        }
    }
}

impl FilterSpec {
    /// Accepts every pair with a non-empty target.
    pub fn keep_all() -> Self {
        Self {
            max_len: usize::MAX,
            min_ratio: f64::MIN_POSITIVE,
            max_ratio: f64::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min_ratio && self.min_ratio < self.max_ratio) {
            return Err(Error::Config(format!(
                "need 0 < min_ratio < max_ratio, got {} and {}",
                self.min_ratio, self.max_ratio
            )));
        }
        Ok(())
    }

    pub fn keeps(&self, src_len: usize, tgt_len: usize) -> Keep {
        if src_len > self.max_len || tgt_len > self.max_len {
            return Keep::TooLong;
        }
        if tgt_len == 0 {
            return Keep::BadRatio;
        }
        let ratio = src_len as f64 / tgt_len as f64;
        if ratio < self.min_ratio || ratio > self.max_ratio {
            Keep::BadRatio
        } else {
            Keep::Yes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Keep {
    Yes,
    TooLong,
    BadRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped_length: usize,
    pub dropped_ratio: usize,
}

pub fn filter_corpus(pairs: Vec<Pair>, spec: &FilterSpec) -> Result<(Vec<Pair>, FilterStats)> {
    spec.validate()?;
    let mut stats = FilterStats::default();
    let kept = pairs
        .into_iter()
        .filter(|(s, t)| match spec.keeps(s.len(), t.len()) {
            Keep::Yes => {
                stats.kept += 1;
                true
            }
            Keep::TooLong => {
                stats.dropped_length += 1;
                false
            }
            Keep::BadRatio => {
                stats.dropped_ratio += 1;
                false
            }
        })
        .collect();
    Ok((kept, stats))
}
