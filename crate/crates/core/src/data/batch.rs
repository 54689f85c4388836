//! Deterministic single-domain mini-batches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DomainDataset;
use super::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::{derive_seed, mix64};

/// How the next batch's domain is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    /// Cycle through domains, one batch each.
    #[default]
    RoundRobin,
    /// Draw a domain with probability proportional to its size.
    Proportional,
}

/// One teacher-forcing batch drawn from a single domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub domain: usize,
    pub domain_id: String,
    pub src: TokenBatch,
    /// `BOS` followed by the target.
    pub tgt_in: TokenBatch,
    /// The target followed by `EOS`.
    pub tgt_out: TokenBatch,
}

impl Batch {
    pub fn from_pairs(domain: usize, domain_id: &str, pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
        let tgt_in: Vec<Vec<usize>> = pairs.iter().map(|p| std::iter::once(BOS).chain(p.1.iter().copied()).collect()).collect();
        let tgt_out: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.iter().copied().chain(std::iter::once(EOS)).collect()).collect();
        Ok(Self {
            domain,
            domain_id: domain_id.to_string(),
            src: TokenBatch::from_rows(&src)?,
            tgt_in: TokenBatch::from_rows(&tgt_in)?,
            tgt_out: TokenBatch::from_rows(&tgt_out)?,
        })
    }
}

/// Padded footprint of one pair: the longer of the source and the decoder sequence.
fn footprint(src: &[usize], tgt: &[usize]) -> usize {
    src.len().max(tgt.len() + 1)
}

struct DomainStream<'a> {
    data: &'a DomainDataset,
    seed: u64,
    epoch: u64,
    groups: Vec<Vec<usize>>,
    next: usize,
}

impl<'a> DomainStream<'a> {
    fn new(data: &'a DomainDataset, seed: u64, batch_tokens: usize) -> Self {
        let mut s = Self {
            data,
            seed,
            epoch: 0,
            groups: Vec::new(),
            next: 0,
        };
        s.groups = s.pack(batch_tokens);
        s
    }

    /// Shuffles for the current epoch and greedily packs pairs so that
    /// `rows × longest footprint` stays within `batch_tokens`.
    fn pack(&self, batch_tokens: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(self.epoch)));
        order.shuffle(&mut rng);
        let mut groups = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        let mut longest = 0;
        for i in order {
            let (s, t) = &self.data.pairs()[i];
            let f = footprint(s, t);
            if !cur.is_empty() && (cur.len() + 1) * longest.max(f) > batch_tokens {
                groups.push(std::mem::take(&mut cur));
                longest = 0;
            }
            longest = longest.max(f);
            cur.push(i);
        }
        if !cur.is_empty() {
            groups.push(cur);
        }
        groups
    }

    fn next_group(&mut self, batch_tokens: usize) -> Vec<usize> {
        if self.next == self.groups.len() {
            self.epoch += 1;
            self.groups = self.pack(batch_tokens);
            self.next = 0;
        }
        self.next += 1;
        self.groups[self.next - 1].clone()
    }
}

/// Endless, seed-deterministic stream of single-domain batches.
pub struct BatchIterator<'a> {
    streams: Vec<DomainStream<'a>>,
    strategy: MixStrategy,
    batch_tokens: usize,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(datasets: &[&'a DomainDataset], strategy: MixStrategy, batch_tokens: usize, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Data("no datasets to batch".into()));
        }
        for d in datasets {
            if d.is_empty() {
                return Err(Error::Data(format!("dataset {} is empty", d.domain_id())));
            }
            let longest = d.pairs().iter().map(|(s, t)| footprint(s, t)).max().unwrap_or(0);
            if longest > batch_tokens {
                return Err(Error::Config(format!(
                    "batch of {batch_tokens} tokens cannot hold the longest pair of {} ({longest} tokens)",
                    d.domain_id()
                )));
            }
        }
        let streams = datasets
            .iter()
            .map(|d| DomainStream::new(d, derive_seed(seed, d.domain_id()), batch_tokens))
            .collect();
        Ok(Self {
            streams,
            strategy,
            batch_tokens,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "mix")),
            cursor: 0,
        })
    }

    /// Completed passes over domain `i`.
    pub fn epochs_completed(&self, i: usize) -> u64 {
        let s = &self.streams[i];
        s.epoch + u64::from(s.next == s.groups.len())
    }

    /// Batches in the first epoch of domain `i`.
    pub fn batches_per_epoch(&self, i: usize) -> usize {
        self.streams[i].groups.len()
    }

    fn pick_domain(&mut self) -> usize {
        match self.strategy {
            MixStrategy::RoundRobin => {
                let d = self.cursor;
                self.cursor = (self.cursor + 1) % self.streams.len();
                d
            }
            MixStrategy::Proportional => {
                let total: usize = self.streams.iter().map(|s| s.data.len()).sum();
                let mut x = self.rng.random_range(0..total);
                for (i, s) in self.streams.iter().enumerate() {
                    if x < s.data.len() {
                        return i;
                    }
                    x -= s.data.len();
                }
                unreachable!("draw below total size")
            }
        }
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let d = self.pick_domain();
        let tokens = self.batch_tokens;
        let stream = &mut self.streams[d];
        let group = stream.next_group(tokens);
        let pairs: Vec<(&[usize], &[usize])> = group
            .iter()
            .map(|&i| {
                let (s, t) = &stream.data.pairs()[i];
                (s.as_slice(), t.as_slice())
            })
            .collect();
        Some(Batch::from_pairs(d, stream.data.domain_id(), &pairs).expect("non-empty pairs"))
    }
}
