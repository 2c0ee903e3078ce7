//! Sequence embedding: per-track projection into the hidden space, type and
//! positional embeddings, and either one shared encoder over the whole
//! sequence or one encoder per track.

mod assemble;
mod encode;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::{DatasetSpec, TrackKind};
use crate::layers::{Encoder, Init, LayerNorm, Linear, StackShape};
use crate::ndgrad::{Activation, ParamId, Real};

pub use assemble::{AssembledSequence, Instance, ProjectedMeans, Span, SpanKind, TrackInput};
pub use encode::Pooled;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    #[serde(alias = "SHARED")]
    Shared,
    #[serde(alias = "MULTI")]
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Whole sequence pooled through the global CLS token.
    #[serde(rename = "CLS")]
    Cls,
    /// No pooling: the full encoded sequence feeds the decoder.
    #[serde(rename = "No", alias = "NONE")]
    None,
    /// Image segments kept, text segment reduced to its local CLS token.
    #[serde(rename = "txt-CLS", alias = "TXT_CLS")]
    TxtCls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub hidden_dim: usize,
    pub variant: EncoderVariant,
    pub pooling: Pooling,
    pub shared_layers: usize,
    pub shared_heads: usize,
    /// Per-track encoders for IMAGE_PATCH and OBJECT.
    pub track_layers: usize,
    pub track_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Enabled image backbones; TEXT is always on.
    pub backbones: Vec<TrackKind>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 768,
            variant: EncoderVariant::Multi,
            pooling: Pooling::None,
            shared_layers: 12,
            shared_heads: 12,
            track_layers: 6,
            track_heads: 8,
            text_layers: 12,
            text_heads: 12,
            ffn_mult: 4,
            dropout: 0.1,
            activation: Activation::Gelu,
            backbones: vec![TrackKind::ImagePatch, TrackKind::Object],
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_dim;
        if h == 0 || self.ffn_mult == 0 {
            return Err(Error::config("hidden_dim and ffn_mult must be >= 1"));
        }
        match (self.pooling, self.variant) {
            (Pooling::Cls, EncoderVariant::Multi) => return Err(Error::config("CLS pooling requires the Shared encoder")),
            (Pooling::TxtCls, EncoderVariant::Shared) => return Err(Error::config("txt-CLS pooling requires the Multi encoders")),
            _ => {}
        }
        let stacks: &[(&str, usize)] = match self.variant {
            EncoderVariant::Shared => &[("shared", self.shared_heads)],
            EncoderVariant::Multi => &[("track", self.track_heads), ("text", self.text_heads)],
        };
        for &(name, heads) in stacks {
            if heads == 0 || h % heads != 0 {
                return Err(Error::config(format!("hidden_dim {h} not divisible by {name} heads {heads}")));
            }
        }
        if self.backbones.contains(&TrackKind::Text) {
            return Err(Error::config("TEXT is always enabled and cannot be listed as a backbone"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Enabled tracks in sequence order.
    pub fn tracks(&self) -> Vec<TrackKind> {
        TrackKind::ALL.into_iter().filter(|k| *k == TrackKind::Text || self.backbones.contains(k)).collect()
    }

    fn shape(&self, layers: usize, heads: usize) -> StackShape {
        StackShape { layers, heads, ffn_width: self.ffn_mult * self.hidden_dim, dropout: self.dropout, activation: self.activation }
    }
}

/// Feature width and maximum length of one track kind across all datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackDims {
    pub dim: usize,
    pub max_len: usize,
}

/// Resolves per-kind dims over datasets; widths must agree.
pub fn track_dims(datasets: &[DatasetSpec]) -> Result<[Option<TrackDims>; 3]> {
    let mut out = [None; 3];
    for ds in datasets {
        for t in &ds.tracks {
            let slot: &mut Option<TrackDims> = &mut out[t.kind.index()];
            match slot {
                None => *slot = Some(TrackDims { dim: t.dim, max_len: t.max_len }),
                Some(d) if d.dim == t.dim => d.max_len = d.max_len.max(t.max_len),
                Some(d) => {
                    return Err(Error::config(format!(
                        "{} width {} in {} differs from {} in another dataset",
                        t.kind.as_str(),
                        t.dim,
                        ds.name,
                        d.dim
                    )))
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub enum Encoders {
    Shared(Encoder),
    /// Indexed by [`TrackKind::index`]; `None` for disabled tracks.
    Multi([Option<Encoder>; 3]),
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub dims: [Option<TrackDims>; 3],
    pub proj: [Option<Linear>; 3],
    /// One row per track kind, plus a fourth row for the global CLS in the shared layout.
    pub type_emb: ParamId,
    pub pos_emb: [Option<ParamId>; 3],
    pub cls: ParamId,
    pub sep: ParamId,
    pub emb_norm: LayerNorm,
    pub encoders: Encoders,
}

pub const GLOBAL_TYPE: usize = 3;

impl Fusion {
    pub fn new<T: Real>(init: &mut Init<T>, cfg: &FusionConfig, datasets: &[DatasetSpec]) -> Result<Self> {
        cfg.validate()?;
        let dims = track_dims(datasets)?;
        let h = cfg.hidden_dim;
        let mut proj = [None, None, None];
        let mut pos_emb = [None, None, None];
        for kind in cfg.tracks() {
            let d = dims[kind.index()]
                .ok_or_else(|| Error::config(format!("{} enabled but no dataset provides it", kind.as_str())))?;
            if kind == TrackKind::Text {
                if d.dim != h {
                    return Err(Error::config(format!("TEXT width {} must equal hidden_dim {h} (text is not projected)", d.dim)));
                }
            } else {
                proj[kind.index()] = Some(Linear::new(init, &format!("fusion.proj.{}", kind.as_str().to_lowercase()), d.dim, h));
            }
            // Room for the separator (and the text CLS in the multi layout).
            pos_emb[kind.index()] = Some(init.normal(&format!("fusion.pos.{}", kind.as_str().to_lowercase()), d.max_len + 2, h, true));
        }
        let type_rows = if cfg.variant == EncoderVariant::Shared { 4 } else { 3 };
        let type_emb = init.normal("fusion.type", type_rows, h, true);
        let (cls, sep) = match cfg.variant {
            EncoderVariant::Shared => (init.normal("fusion.cls", 1, h, true), init.normal("fusion.sep", 1, h, true)),
            EncoderVariant::Multi => (init.normal("fusion.text_cls", 1, h, true), init.normal("fusion.text_sep", 1, h, true)),
        };
        let emb_norm = LayerNorm::new(init, "fusion.embeddings", h);
        let encoders = match cfg.variant {
            EncoderVariant::Shared => {
                Encoders::Shared(Encoder::new(init, "fusion.encoder", h, &cfg.shape(cfg.shared_layers, cfg.shared_heads)))
            }
            EncoderVariant::Multi => {
                let mut enc = [None, None, None];
                for kind in cfg.tracks() {
                    let shape = match kind {
                        TrackKind::Text => cfg.shape(cfg.text_layers, cfg.text_heads),
                        _ => cfg.shape(cfg.track_layers, cfg.track_heads),
                    };
                    let name = format!("fusion.encoder.{}", kind.as_str().to_lowercase());
                    enc[kind.index()] = Some(Encoder::new(init, &name, h, &shape));
                }
                Encoders::Multi(enc)
            }
        };
        Ok(Self { cfg: cfg.clone(), dims, proj, type_emb, pos_emb, cls, sep, emb_norm, encoders })
    }

    /// Largest sequence the layout can produce for the configured tracks.
    pub fn max_len(&self) -> usize {
        let lens = self.cfg.tracks().into_iter().map(|k| self.dims[k.index()].map_or(0, |d| d.max_len));
        match self.cfg.variant {
            EncoderVariant::Shared => 1 + lens.map(|n| n + 1).sum::<usize>(),
            EncoderVariant::Multi => 2 + lens.sum::<usize>(),
        }
    }
}
