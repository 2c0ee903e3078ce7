use crate::error::Result;
use crate::featurestore::TrackKind;
use crate::layers::Fwd;
use crate::ndgrad::{Real, Var};

use super::{AssembledSequence, Encoders, Fusion, Pooling, Span, SpanKind};

/// Encoder output after pooling.
#[derive(Clone, Debug)]
pub enum Pooled {
    /// `[1 x hidden_dim]`
    Vector(Var),
    /// `[L' x hidden_dim]` with its mask and the track spans that tile it.
    Sequence { x: Var, mask: Vec<bool>, spans: Vec<Span> },
}

impl Fusion {
    pub fn encode<T: Real>(&self, f: &mut Fwd<T>, seq: &AssembledSequence) -> Result<Var> {
        match &self.encoders {
            Encoders::Shared(enc) => enc.forward(f, seq.tokens, Some(&seq.mask)),
            Encoders::Multi(encs) => {
                let mut outs = Vec::with_capacity(seq.blocks.len());
                for b in seq.blocks.iter().filter(|b| b.len > 0) {
                    let SpanKind::Track(kind) = b.kind else { unreachable!("multi layout has no global CLS") };
                    let enc = encs[kind.index()].as_ref().expect("encoder for enabled track");
                    let idx: Vec<usize> = b.range().collect();
                    let x = if b.len == seq.len() { seq.tokens } else { f.g.rows(seq.tokens, &idx)? };
                    outs.push(enc.forward(f, x, Some(&seq.mask[b.range()]))?);
                }
                if outs.len() == 1 {
                    Ok(outs[0])
                } else {
                    Ok(f.g.concat_rows(&outs)?)
                }
            }
        }
    }

    pub fn pool<T: Real>(&self, f: &mut Fwd<T>, encoded: Var, seq: &AssembledSequence) -> Result<Pooled> {
        match self.cfg.pooling {
            Pooling::Cls => {
                let at = seq.cls_position.expect("validated: CLS pooling implies the shared layout");
                Ok(Pooled::Vector(f.g.rows(encoded, &[at])?))
            }
            Pooling::None => Ok(Pooled::Sequence { x: encoded, mask: seq.mask.clone(), spans: seq.blocks.clone() }),
            Pooling::TxtCls => {
                let mut idx = Vec::new();
                let mut spans = Vec::new();
                for b in &seq.blocks {
                    let start = idx.len();
                    if b.kind == SpanKind::Track(TrackKind::Text) {
                        idx.push(seq.text_cls.expect("validated: txt-CLS pooling implies the multi layout"));
                    } else {
                        idx.extend(b.range());
                    }
                    spans.push(Span { kind: b.kind, start, len: idx.len() - start });
                }
                let mask = idx.iter().map(|&i| seq.mask[i]).collect();
                Ok(Pooled::Sequence { x: f.g.rows(encoded, &idx)?, mask, spans })
            }
        }
    }

    /// Assemble, drop masked positions, encode and pool. The returned
    /// sequence is the compacted one that the pooled spans refer to.
    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, inst: &super::Instance<T>) -> Result<(AssembledSequence, Pooled)> {
        let seq = self.assemble(f, inst)?.compacted(f.g)?;
        let enc = self.encode(f, &seq)?;
        let pooled = self.pool(f, enc, &seq)?;
        Ok((seq, pooled))
    }
}
