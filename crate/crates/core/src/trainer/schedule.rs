use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One dataset-pure mini-batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub dataset: usize,
    pub ids: Vec<u64>,
}

/// Batches of one epoch, in training order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub epoch: usize,
    pub seed: u64,
    pub batches: Vec<Batch>,
}

impl Schedule {
    /// Number of batches drawn from each dataset.
    pub fn counts(&self, datasets: usize) -> Vec<usize> {
        let mut c = vec![0; datasets];
        for b in &self.batches {
            c[b.dataset] += 1;
        }
        c
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a (seed, purpose, indices...) coordinate.
pub fn derive_rng(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for b in purpose.bytes() {
        h = mix(h ^ b as u64);
    }
    for &i in indices {
        h = mix(h.wrapping_add(0x9e37_79b9_7f4a_7c15) ^ i);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Shuffles every dataset's ids, chunks them into batches (keeping the last
/// partial batch) and interleaves all batches in a random order, so that each
/// position draws a dataset in proportion to its remaining batches.
pub fn build_schedule(datasets: &[&[u64]], batch_size: usize, seed: u64, epoch: usize) -> Result<Schedule> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if datasets.is_empty() {
        return Err(Error::config("no datasets to schedule"));
    }
    let mut per_dataset = Vec::with_capacity(datasets.len());
    for (d, ids) in datasets.iter().enumerate() {
        if ids.is_empty() {
            return Err(Error::data(format!("dataset {d} has no training records")));
        }
        let mut ids = ids.to_vec();
        ids.shuffle(&mut derive_rng(seed, "shuffle", &[epoch as u64, d as u64]));
        per_dataset.push(ids.chunks(batch_size).map(|c| c.to_vec()).collect::<Vec<_>>().into_iter());
    }
    let mut order: Vec<usize> = per_dataset.iter().enumerate().flat_map(|(d, it)| std::iter::repeat_n(d, it.len())).collect();
    order.shuffle(&mut derive_rng(seed, "interleave", &[epoch as u64]));
    let batches = order
        .into_iter()
        .map(|d| Batch { dataset: d, ids: per_dataset[d].next().expect("one chunk per slot") })
        .collect();
    Ok(Schedule { epoch, seed, batches })
}
