//! Trainable building blocks. Every block stores parameter ids only; values
//! live in a [`ParamStore`] so the same model runs in `f32` and `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndgrad::{Activation, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Forward-pass context: the tape, the parameter values and, in training
/// mode, the dropout stream.
pub struct Fwd<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Fwd<'a, T> {
    pub fn eval(g: &'a mut Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self { g, store, rng: None }
    }

    pub fn train(g: &'a mut Graph<T>, store: &'a ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { g, store, rng: Some(rng) }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => Ok(self.g.dropout(x, p, rng)?),
            _ => Ok(x),
        }
    }
}

/// Parameter initializer shared by all blocks of one model.
pub struct Init<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, decay: bool) -> ParamId {
        let dist = Normal::new(0.0, INIT_STD).unwrap();
        let data = (0..rows * cols).map(|_| T::of(dist.sample(self.rng))).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data).unwrap(), decay)
    }

    pub fn constant(&mut self, name: &str, n: usize, value: f64, decay: bool) -> ParamId {
        self.store.add(name, Tensor::filled(vec![n], T::of(value)), decay)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = init.normal(&format!("{name}.weight"), d_in, d_out, true);
        let b = init.constant(&format!("{name}.bias"), d_out, 0.0, false);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.g.matmul(x, w)?;
        Ok(f.g.add_row(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.ln_weight"), d, 1.0, false),
            beta: init.constant(&format!("{name}.ln_bias"), d, 0.0, false),
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gamma), f.p(self.beta));
        Ok(f.g.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output of one attention block plus the node holding its probabilities.
pub struct Attended {
    pub out: Var,
    pub attn: Var,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), d, d),
            k: Linear::new(init, &format!("{name}.k"), d, d),
            v: Linear::new(init, &format!("{name}.v"), d, d),
            o: Linear::new(init, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var, src: Var, key_mask: Option<&[bool]>) -> Result<Attended> {
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, src)?;
        let v = self.v.forward(f, src)?;
        let attn = f.g.attention(q, k, v, self.heads, key_mask)?;
        Ok(Attended { out: self.o.forward(f, attn)?, attn })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, width: usize, activation: Activation) -> Self {
        Self {
            up: Linear::new(init, &format!("{name}.up"), d, width),
            down: Linear::new(init, &format!("{name}.down"), width, d),
            activation,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.g.activation(h, self.activation)?;
        self.down.forward(f, h)
    }
}

/// Shape of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackShape {
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub activation: Activation,
}

/// Post-norm encoder layer: self-attention then feed-forward, each wrapped in
/// dropout, a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub name: String,
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, shape: &StackShape) -> Self {
        Self {
            name: name.to_string(),
            attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, shape.heads),
            ln1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, shape.ffn_width, shape.activation),
            ln2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            dropout: shape.dropout,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        self.run(f, x, mask).map_err(|e| match e {
            Error::Grad(g) => Error::at(&self.name, g),
            other => other,
        })
    }

    fn run<T: Real>(&self, f: &mut Fwd<T>, x: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let a = self.attn.forward(f, x, x, mask)?;
        let h = f.dropout(a.out, self.dropout)?;
        let h = f.g.add(x, h)?;
        let h = self.ln1.forward(f, h)?;
        let y = self.ffn.forward(f, h)?;
        let y = f.dropout(y, self.dropout)?;
        let y = f.g.add(h, y)?;
        Ok((self.ln2.forward(f, y)?, a.attn))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, shape: &StackShape) -> Self {
        Self { layers: (0..shape.layers).map(|i| EncoderLayer::new(init, &format!("{name}.layer{i}"), d, shape)).collect() }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, mut x: Var, mask: Option<&[bool]>) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(f, x, mask)?.0;
        }
        Ok(x)
    }
}

/// Post-norm decoder layer without a causal mask: self-attention over the
/// targets, cross-attention into the source, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub name: String,
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
    pub dropout: f64,
}

/// Attention nodes of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderAttn {
    pub self_attn: Var,
    pub cross_attn: Var,
}

impl DecoderLayer {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, shape: &StackShape) -> Self {
        Self {
            name: name.to_string(),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, shape.heads),
            ln1: LayerNorm::new(init, &format!("{name}.norm1"), d),
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), d, shape.heads),
            ln2: LayerNorm::new(init, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), d, shape.ffn_width, shape.activation),
            ln3: LayerNorm::new(init, &format!("{name}.norm3"), d),
            dropout: shape.dropout,
        }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var, src: Var, src_mask: &[bool]) -> Result<(Var, DecoderAttn)> {
        self.run(f, x, src, src_mask).map_err(|e| match e {
            Error::Grad(g) => Error::at(&self.name, g),
            other => other,
        })
    }

    fn run<T: Real>(&self, f: &mut Fwd<T>, x: Var, src: Var, src_mask: &[bool]) -> Result<(Var, DecoderAttn)> {
        let s = self.self_attn.forward(f, x, x, None)?;
        let h = f.dropout(s.out, self.dropout)?;
        let h = f.g.add(x, h)?;
        let h = self.ln1.forward(f, h)?;
        let c = self.cross_attn.forward(f, h, src, Some(src_mask))?;
        let y = f.dropout(c.out, self.dropout)?;
        let y = f.g.add(h, y)?;
        let y = self.ln2.forward(f, y)?;
        let z = self.ffn.forward(f, y)?;
        let z = f.dropout(z, self.dropout)?;
        let z = f.g.add(y, z)?;
        Ok((self.ln3.forward(f, z)?, DecoderAttn { self_attn: s.attn, cross_attn: c.attn }))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d: usize, shape: &StackShape) -> Self {
        Self { layers: (0..shape.layers).map(|i| DecoderLayer::new(init, &format!("{name}.layer{i}"), d, shape)).collect() }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, mut x: Var, src: Var, src_mask: &[bool]) -> Result<(Var, Vec<DecoderAttn>)> {
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, a) = layer.forward(f, x, src, src_mask)?;
            x = y;
            attn.push(a);
        }
        Ok((x, attn))
    }
}

/// Head-averaged `[Lq x Lk]` probabilities of an attention node.
pub fn head_mean<T: Real>(g: &Graph<T>, attn: Var) -> Option<Vec<f64>> {
    let (probs, heads) = g.attention_probs(attn)?;
    let n = probs.len() / heads;
    let mut out = vec![0.0; n];
    for h in 0..heads {
        for (o, p) in out.iter_mut().zip(&probs[h * n..(h + 1) * n]) {
            *o += p.f64() / heads as f64;
        }
    }
    Some(out)
}
