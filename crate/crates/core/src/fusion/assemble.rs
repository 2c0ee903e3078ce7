use crate::error::{Error, Result};
use crate::featurestore::{object_mask, DatasetSpec, FeatureRecord, TrackKind};
use crate::layers::Fwd;
use crate::ndgrad::{Graph, Real, Tensor, Var};

use super::{EncoderVariant, Fusion, GLOBAL_TYPE};

/// One track of a model-ready instance.
#[derive(Clone, Debug)]
pub struct TrackInput<T> {
    /// `[seq_len x dim]`
    pub tokens: Tensor<T>,
    /// Validity after no-object masking.
    pub mask: Vec<bool>,
}

/// A record converted to the model's scalar type, with detector boxes masked.
#[derive(Clone, Debug)]
pub struct Instance<T> {
    pub id: u64,
    pub labels: Vec<u8>,
    /// Indexed by [`TrackKind::index`].
    pub tracks: [Option<TrackInput<T>>; 3],
}

impl<T: Real> Instance<T> {
    pub fn from_record(spec: &DatasetSpec, record: &FeatureRecord) -> Result<Self> {
        record.validate(spec)?;
        let mut tracks = [None, None, None];
        for (data, ts) in record.tracks.iter().zip(&spec.tracks) {
            let mask = match (&data.logits, ts.no_object_index) {
                (Some(l), Some(no_obj)) => object_mask(l, ts.logit_classes, no_obj, &data.mask)?,
                _ => data.mask.clone(),
            };
            let values = data.tokens.iter().map(|&x| T::of(x as f64)).collect();
            let tokens = Tensor::matrix(data.seq_len(), ts.dim, values)?;
            tracks[ts.kind.index()] = Some(TrackInput { tokens, mask });
        }
        Ok(Self { id: record.id, labels: record.labels.clone(), tracks })
    }

    pub fn track(&self, kind: TrackKind) -> Option<&TrackInput<T>> {
        self.tracks[kind.index()].as_ref()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Track(TrackKind),
    GlobalCls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Masked means of one projected track before and after projection.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedMeans {
    pub kind: TrackKind,
    /// `[dim]`, constant.
    pub raw: Var,
    /// `[hidden_dim]`
    pub proj: Var,
}

#[derive(Clone, Debug)]
pub struct AssembledSequence {
    /// `[L x hidden_dim]` normalized embedding sum.
    pub tokens: Var,
    pub mask: Vec<bool>,
    pub type_ids: Vec<usize>,
    /// Content tokens per track, in sequence order.
    pub segments: Vec<Span>,
    /// Positions owned by each track including its special tokens, plus the
    /// global CLS in the shared layout. These tile the whole sequence.
    pub blocks: Vec<Span>,
    pub cls_position: Option<usize>,
    pub text_cls: Option<usize>,
    pub projected: Vec<ProjectedMeans>,
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Drops masked positions. Masked tokens are never attended to, so the
    /// encoder output at every kept position is unchanged.
    pub fn compacted<T: Real>(&self, g: &mut Graph<T>) -> Result<AssembledSequence> {
        if self.mask.iter().all(|&m| m) {
            return Ok(self.clone());
        }
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.mask[i]).collect();
        let new_index = |i: usize| keep.partition_point(|&k| k < i);
        let remap = |spans: &[Span]| -> Vec<Span> {
            spans
                .iter()
                .map(|s| {
                    let start = new_index(s.start);
                    Span { kind: s.kind, start, len: new_index(s.start + s.len) - start }
                })
                .collect()
        };
        Ok(AssembledSequence {
            tokens: g.rows(self.tokens, &keep)?,
            mask: vec![true; keep.len()],
            type_ids: keep.iter().map(|&i| self.type_ids[i]).collect(),
            segments: remap(&self.segments),
            blocks: remap(&self.blocks),
            cls_position: self.cls_position.map(new_index),
            text_cls: self.text_cls.map(new_index),
            projected: self.projected.clone(),
        })
    }
}

/// Weights that average the valid rows.
fn mean_weights<T: Real>(mask: &[bool]) -> Vec<T> {
    let n = mask.iter().filter(|&&m| m).count();
    let w = if n == 0 { T::zero() } else { T::of(1.0 / n as f64) };
    mask.iter().map(|&m| if m { w } else { T::zero() }).collect()
}

impl Fusion {
    /// Affine map of IMAGE_PATCH or OBJECT tokens into the hidden space.
    pub fn project<T: Real>(&self, f: &mut Fwd<T>, kind: TrackKind, tokens: Var) -> Result<Var> {
        match &self.proj[kind.index()] {
            Some(lin) => lin.forward(f, tokens),
            None if kind == TrackKind::Text => Err(Error::config("TEXT tokens are never projected")),
            None => Err(Error::config(format!("{} backbone is disabled", kind.as_str()))),
        }
    }

    pub fn assemble<T: Real>(&self, f: &mut Fwd<T>, inst: &Instance<T>) -> Result<AssembledSequence> {
        let h = self.cfg.hidden_dim;
        let shared = self.cfg.variant == EncoderVariant::Shared;
        let mut parts = Vec::new();
        let mut pos_parts = Vec::new();
        let mut mask = Vec::new();
        let mut type_ids = Vec::new();
        let mut segments = Vec::new();
        let mut blocks = Vec::new();
        let mut projected = Vec::new();
        let (mut cls_position, mut text_cls) = (None, None);
        let (cls, sep) = (f.p(self.cls), f.p(self.sep));
        if shared {
            parts.push(cls);
            pos_parts.push(f.g.constant(Tensor::zeros(vec![1, h]))?);
            type_ids.push(GLOBAL_TYPE);
            mask.push(true);
            blocks.push(Span { kind: SpanKind::GlobalCls, start: 0, len: 1 });
            cls_position = Some(0);
        }
        for kind in self.cfg.tracks() {
            let t = inst
                .track(kind)
                .ok_or_else(|| Error::data(format!("record {} lacks a {} track", inst.id, kind.as_str())))?;
            let n = t.mask.len();
            let raw = f.g.constant(t.tokens.clone())?;
            let content = if kind == TrackKind::Text {
                raw
            } else {
                let p = self.project(f, kind, raw)?;
                let w = mean_weights::<T>(&t.mask);
                let raw_mean = f.g.weighted_row_sum(raw, &w)?;
                let proj_mean = f.g.weighted_row_sum(p, &w)?;
                projected.push(ProjectedMeans { kind, raw: raw_mean, proj: proj_mean });
                p
            };
            let pos_table = f.p(self.pos_emb[kind.index()].expect("positional table for enabled track"));
            let start = mask.len();
            let text_local = !shared && kind == TrackKind::Text;
            // Positions of content tokens inside the track's own table.
            let offset = usize::from(text_local);
            if text_local {
                parts.push(cls);
                mask.push(true);
                text_cls = Some(start);
            }
            parts.push(content);
            mask.extend_from_slice(&t.mask);
            segments.push(Span { kind: SpanKind::Track(kind), start: start + offset, len: n });
            let specials = if shared { 1 } else if text_local { 2 } else { 0 };
            if shared || text_local {
                parts.push(sep);
                mask.push(true);
            }
            // Separators sit right after the last valid token, so trailing padding
            // leaves every valid position unchanged.
            let sep_pos = t.mask.iter().rposition(|&m| m).map_or(0, |i| i + 1) + offset;
            let mut positions: Vec<usize> = (0..n + offset).collect();
            if specials > 0 {
                positions.push(sep_pos);
            }
            pos_parts.push(f.g.rows(pos_table, &positions)?);
            type_ids.extend(std::iter::repeat_n(kind.index(), n + specials));
            blocks.push(Span { kind: SpanKind::Track(kind), start, len: n + specials });
        }
        let max = self.max_len();
        if mask.len() > max {
            return Err(Error::data(format!("record {}: sequence length {} exceeds {max}", inst.id, mask.len())));
        }
        let x = f.g.concat_rows(&parts)?;
        let p = f.g.concat_rows(&pos_parts)?;
        let type_table = f.p(self.type_emb);
        let ty = f.g.rows(type_table, &type_ids)?;
        let e = f.g.add(x, p)?;
        let e = f.g.add(e, ty)?;
        let e = self.emb_norm.forward(f, e)?;
        let tokens = f.dropout(e, self.cfg.dropout)?;
        Ok(AssembledSequence { tokens, mask, type_ids, segments, blocks, cls_position, text_cls, projected })
    }
}
