//! Training: multi-dataset batch scheduling, the MADGRAD optimizer with a
//! linear warmup schedule, gradient accumulation and clipping, evaluation
//! metrics, checkpoints and the run loop.

mod checkpoint;
mod metrics;
mod optim;
mod run;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{f1, score_a, score_b, Metric};
pub use optim::{apply_weight_decay, clip_grad_norm, lr_at, optimizer_steps, warmup_steps, Madgrad, MadgradState};
pub use run::{
    evaluate, run, DataSplits, RunOptions, RunSummary, ScoreSeries, Split, TaskScore, TrainJob, BEST_CHECKPOINT, CONFIG_FILE, INCOMPLETE_MARKER,
    LAST_CHECKPOINT, LOCK_FILE, METRICS_FILE, SUMMARY_FILE, TRACE_FILE,
};
pub use schedule::{build_schedule, derive_rng, Batch, Schedule};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Batches per optimizer step.
    pub accumulation_every: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub momentum: f64,
    pub eps: f64,
    /// Probability threshold for a positive prediction.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 15,
            lr: 2e-4,
            accumulation_every: 20,
            weight_decay: 5e-4,
            clip_norm: 0.5,
            momentum: 0.9,
            eps: 1e-6,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.accumulation_every == 0 {
            return Err(Error::config("batch_size, epochs and accumulation_every must be positive"));
        }
        let positive = [("lr", self.lr), ("clip_norm", self.clip_norm), ("eps", self.eps)];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(format!("{k} must be positive, got {v}")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
