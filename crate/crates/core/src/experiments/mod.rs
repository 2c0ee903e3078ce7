//! Experiment harness: the flat run configuration, ablation round grids and
//! tables, split directories, attention and embedding exports, and score
//! statistics.

mod ablation;
mod data;
mod stats;
mod viz;

pub use ablation::{ablation_grid, collect_round, render_round_table, Experiment, RoundTable, TableRow, ROUND_SPLITS, ROUND_TASKS};
pub use data::{load_splits, write_splits, DEV_DIR, TEST_DIR, TRAIN_DIR};
pub use stats::{quartiles, series_stats, SeriesStats};
pub use viz::{attention_summary, embedding_export, query_alignment, AttentionSummary, EmbeddingExport, EmbeddingPoint, QueryAlignment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::{DatasetSpec, TrackKind};
use crate::fusion::{EncoderVariant, FusionConfig, Pooling};
use crate::heads::HeadConfig;
use crate::model::ModelConfig;
use crate::ndgrad::Activation;
use crate::objectives::AuxFlags;
use crate::trainer::{TrainConfig, TrainJob};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum YesNo {
    Yes,
    No,
}

impl YesNo {
    pub fn on(self) -> bool {
        self == YesNo::Yes
    }
}

impl From<bool> for YesNo {
    fn from(b: bool) -> Self {
        if b {
            YesNo::Yes
        } else {
            YesNo::No
        }
    }
}

/// Flat run configuration: the six ablation axes plus every model and
/// training hyperparameter. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder_variant: EncoderVariant,
    pub pooling: Pooling,
    pub proj_align: YesNo,
    pub contrastive: YesNo,
    pub multi_task: YesNo,
    pub backbones: Vec<TrackKind>,

    pub hidden_dim: usize,
    pub shared_layers: usize,
    pub shared_heads: usize,
    pub track_layers: usize,
    pub track_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub mlp_hidden: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub accumulation_every: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub momentum: f64,
    pub eps: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let f = FusionConfig::default();
        let h = HeadConfig::default();
        let t = TrainConfig::default();
        Self {
            encoder_variant: f.variant,
            pooling: f.pooling,
            proj_align: YesNo::No,
            contrastive: YesNo::No,
            multi_task: YesNo::No,
            backbones: f.backbones,
            hidden_dim: f.hidden_dim,
            shared_layers: f.shared_layers,
            shared_heads: f.shared_heads,
            track_layers: f.track_layers,
            track_heads: f.track_heads,
            text_layers: f.text_layers,
            text_heads: f.text_heads,
            ffn_mult: f.ffn_mult,
            dropout: f.dropout,
            activation: f.activation,
            mlp_hidden: h.mlp_hidden,
            decoder_layers: h.decoder_layers,
            decoder_heads: h.decoder_heads,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            accumulation_every: t.accumulation_every,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            momentum: t.momentum,
            eps: t.eps,
            threshold: t.threshold,
            seed: t.seed,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config; unknown or mistyped keys are config errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.model()?;
        cfg.train().validate()?;
        Ok(cfg)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            hidden_dim: self.hidden_dim,
            variant: self.encoder_variant,
            pooling: self.pooling,
            shared_layers: self.shared_layers,
            shared_heads: self.shared_heads,
            track_layers: self.track_layers,
            track_heads: self.track_heads,
            text_layers: self.text_layers,
            text_heads: self.text_heads,
            ffn_mult: self.ffn_mult,
            dropout: self.dropout,
            activation: self.activation,
            backbones: self.backbones.clone(),
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let fusion = self.fusion();
        fusion.validate()?;
        let mut cfg = ModelConfig {
            fusion,
            head: HeadConfig {
                mlp_hidden: self.mlp_hidden,
                decoder_layers: self.decoder_layers,
                decoder_heads: self.decoder_heads,
                ffn_mult: self.ffn_mult,
                dropout: self.dropout,
                activation: self.activation,
                ..HeadConfig::default()
            },
            aux: AuxFlags { align: self.proj_align.on(), contrastive: self.contrastive.on() },
        };
        cfg.head.mode = cfg.head_mode();
        Ok(cfg)
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            accumulation_every: self.accumulation_every,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            momentum: self.momentum,
            eps: self.eps,
            threshold: self.threshold,
            seed: self.seed,
        }
    }

    /// Job over the primary dataset, plus the auxiliary ones when multi-task is on.
    pub fn job(&self, datasets: &[DatasetSpec]) -> Result<TrainJob> {
        let Some(primary) = datasets.first() else {
            return Err(Error::config("at least one dataset is required"));
        };
        let datasets = if self.multi_task.on() {
            if datasets.len() < 2 {
                return Err(Error::config("multi_task needs a second dataset"));
            }
            datasets.to_vec()
        } else {
            vec![primary.clone()]
        };
        let train = self.train();
        train.validate()?;
        Ok(TrainJob { model: self.model()?, train, datasets })
    }
}
