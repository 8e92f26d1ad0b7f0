//! Group-balanced batch sampling. Both strategies give each of the four
//! groups equal expected weight regardless of how many records it holds,
//! which is the point: speech corpora outweigh sound corpora by orders of
//! magnitude, and an unbalanced stream would drown the small groups.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Group, ManifestRecord};
use crate::error::{GlapError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SamplingStrategy {
    /// Each batch slot independently picks a group uniformly, then a
    /// record uniformly within that group (with replacement).
    #[value(name = "uniform", alias = "per-example-uniform")]
    PerExampleUniform,
    /// Every batch holds exactly floor(B/4) records per group; the
    /// remainder rotates round-robin across batches.
    #[value(name = "stratified", alias = "per-batch-stratified")]
    PerBatchStratified,
}

impl Default for SamplingStrategy {
    fn default() -> Self {
        SamplingStrategy::PerExampleUniform
    }
}

/// Deterministic sampler over a manifest. Given (seed, strategy,
/// manifest) the batch sequence is fully reproducible; batches are record
/// indices into the manifest slice the sampler was built from.
#[derive(Debug, Clone)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    strategy: SamplingStrategy,
    groups: [Vec<usize>; 4],
    /// Round-robin start for the stratified remainder.
    cursor: usize,
    batches_drawn: u64,
}

impl SamplerState {
    pub fn new(records: &[ManifestRecord], strategy: SamplingStrategy, seed: u64) -> Result<Self> {
        let mut groups: [Vec<usize>; 4] = Default::default();
        for (i, r) in records.iter().enumerate() {
            groups[r.group.index()].push(i);
        }
        for g in Group::ALL {
            if groups[g.index()].is_empty() {
                return Err(GlapError::Config(format!(
                    "group {} has no records; balanced sampling needs all four groups",
                    g.name()
                )));
            }
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            strategy,
            groups,
            cursor: 0,
            batches_drawn: 0,
        })
    }

    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy
    }

    pub fn batches_drawn(&self) -> u64 {
        self.batches_drawn
    }

    /// Draws the next batch of `b` record indices and advances the state.
    pub fn sample_batch(&mut self, b: usize) -> Result<Vec<usize>> {
        if b < 4 {
            return Err(GlapError::Config(format!(
                "batch size must be at least 4 (one slot per group), got {b}"
            )));
        }
        let mut batch = Vec::with_capacity(b);
        match self.strategy {
            SamplingStrategy::PerExampleUniform => {
                for _ in 0..b {
                    let g = self.rng.gen_range(0..4usize);
                    let members = &self.groups[g];
                    batch.push(members[self.rng.gen_range(0..members.len())]);
                }
            }
            SamplingStrategy::PerBatchStratified => {
                let base = b / 4;
                let rem = b % 4;
                let mut counts = [base; 4];
                for k in 0..rem {
                    counts[(self.cursor + k) % 4] += 1;
                }
                self.cursor = (self.cursor + rem) % 4;
                for g in 0..4 {
                    let members = &self.groups[g];
                    for _ in 0..counts[g] {
                        batch.push(members[self.rng.gen_range(0..members.len())]);
                    }
                }
            }
        }
        self.batches_drawn += 1;
        Ok(batch)
    }

    /// Yields exactly `steps_per_epoch` batches. An "epoch" is a step
    /// count, not a pass over the data.
    pub fn epoch(&mut self, b: usize, steps_per_epoch: usize) -> Result<Vec<Vec<usize>>> {
        if steps_per_epoch == 0 {
            return Err(GlapError::Config("steps_per_epoch must be at least 1".into()));
        }
        (0..steps_per_epoch).map(|_| self.sample_batch(b)).collect()
    }
}

/// Per-group counts of a batch, in [`Group::ALL`] order.
pub fn group_counts(records: &[ManifestRecord], batch: &[usize]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for &i in batch {
        counts[records[i].group.index()] += 1;
    }
    counts
}
