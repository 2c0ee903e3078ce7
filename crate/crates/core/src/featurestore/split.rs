use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureRecord, StoreError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u64>,
    pub dev: Vec<u64>,
}

/// Stratifies by the full label vector. Each stratum sends `round(n * ratio)`
/// records to train; a singleton stratum goes to train. Ids keep record order.
pub fn stratified_split(records: &[FeatureRecord], ratio: f64, seed: u64) -> Result<Split, StoreError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(StoreError::Config(format!("split ratio {ratio} must be in (0, 1)")));
    }
    let mut strata: BTreeMap<&[u8], Vec<u64>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id) {
            return Err(StoreError::Inconsistent(format!("duplicate record id {}", r.id)));
        }
        strata.entry(&r.labels).or_default().push(r.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = HashSet::new();
    for ids in strata.values_mut() {
        ids.shuffle(&mut rng);
        let n_train = ((ids.len() as f64 * ratio).round() as usize).max(1);
        train.extend(ids[..n_train].iter().copied());
    }
    let (train, dev) = records.iter().map(|r| r.id).partition(|id| train.contains(id));
    Ok(Split { train, dev })
}
