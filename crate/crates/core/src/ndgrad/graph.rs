use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, dot};
use super::{GradError, ParamId, ParamStore, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, T),
    MulConst(Var, Vec<T>),
    Act(Var, Activation),
    Log(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Rows { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    WeightedRowSum(Var, Vec<T>),
    Cosine { u: Var, v: Var, nu: T, nv: T },
    CosineMatrix { x: Var, norms: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Floor applied to vector norms inside cosine similarities.
pub const COSINE_EPS: f64 = 1e-8;

/// Define-by-run computation tape.
///
/// Nodes are appended in execution order, so operands always precede their
/// consumers. Every forward op checks its output and fails with the op name
/// if a NaN or infinity appears.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    verify: bool,
    flags: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: HashMap::new(), verify: false, flags: Vec::new() }
    }

    /// A graph that records numerical guard activations (see [`Graph::flags`]).
    pub fn verifying() -> Self {
        Self { verify: true, ..Self::new() }
    }

    /// Guard activations recorded in verification mode, e.g. a cosine
    /// similarity evaluated on a zero-norm vector.
    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, GradError> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(op: &'static str, detail: String) -> GradError {
        GradError::Shape { op, detail }
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var, GradError> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Node for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Self::shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Self::shape_err("matmul_nt", format!("{:?} x {:?}^T", self.shape(a), self.shape(b))));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul_nt", Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var, GradError> {
        self.same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(op, value, node, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, GradError> {
        let (m, n) = self.dims(a);
        if self.nodes[row.0].value.numel() != n {
            return Err(Self::shape_err("add_row", format!("{:?} + row {:?}", self.shape(a), self.shape(row))));
        }
        let r = self.data(row);
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += x;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.needs(a) || self.needs(row);
        self.push("add_row", value, Op::AddRow(a, row), ng)
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var, GradError> {
        let data = self.data(a).iter().map(|&x| scale * x + shift).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        self.push("affine", value, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Result<Var, GradError> {
        self.affine(a, scale, T::zero())
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var, GradError> {
        if c.numel() != self.nodes[a.0].value.numel() {
            return Err(Self::shape_err("mul_const", format!("{:?} * {:?}", self.shape(a), c.shape())));
        }
        let data = self.data(a).iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        self.push("mul_const", value, Op::MulConst(a, c.data().to_vec()), ng)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, GradError> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let mask = Tensor::new(self.shape(a).to_vec(), mask)?;
        self.mul_const(a, &mask)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var, GradError> {
        let f: fn(T) -> T = match kind {
            Activation::Gelu => kernels::gelu,
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Relu => |x: T| x.max(T::zero()),
        };
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        let name = match kind {
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        };
        self.push(name, value, Op::Act(a, kind), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, GradError> {
        self.activation(a, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GradError> {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GradError> {
        self.activation(a, Activation::Relu)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GradError> {
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        self.push("log", value, Op::Log(a), ng)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var, GradError> {
        let data = self.data(a).iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        self.push("abs", value, Op::Abs(a), ng)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, GradError> {
        let data = self.data(a).iter().map(|&x| x.max(lo).min(hi)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a);
        self.push("clamp", value, Op::Clamp(a, lo, hi), ng)
    }

    /// Softmax of a matrix along `axis` (1 = within rows, 0 = within columns).
    ///
    /// `mask` is either one flag per position along `axis` (broadcast over
    /// the other axis) or one flag per element. Masked entries come out as
    /// exactly 0; a slice with no unmasked entry is an error.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, GradError> {
        let (rows, cols) = self.dims(x);
        let (slices, len, outer_stride, inner_stride) = match axis {
            1 => (rows, cols, cols, 1),
            0 => (cols, rows, 1, cols),
            _ => return Err(Self::shape_err("softmax", format!("axis {axis} on a matrix"))),
        };
        let full_mask = match mask {
            None => None,
            Some(m) if m.len() == len => Some((0..rows * cols).map(|e| {
                let pos = if axis == 1 { e % cols } else { e / cols };
                m[pos]
            }).collect::<Vec<_>>()),
            Some(m) if m.len() == rows * cols => Some(m.to_vec()),
            Some(m) => {
                return Err(Self::shape_err("softmax", format!("mask of {} for {:?}", m.len(), self.shape(x))))
            }
        };
        let input = self.data(x);
        let mut out = vec![T::zero(); rows * cols];
        for s in 0..slices {
            let idx = |t: usize| s * outer_stride + t * inner_stride;
            let valid = |e: usize| full_mask.as_ref().is_none_or(|m| m[e]);
            let mut max = T::neg_infinity();
            for t in 0..len {
                if valid(idx(t)) {
                    max = max.max(input[idx(t)]);
                }
            }
            if max == T::neg_infinity() {
                return Err(GradError::FullyMasked { op: "softmax" });
            }
            let mut sum = T::zero();
            for t in 0..len {
                let e = idx(t);
                if valid(e) {
                    out[e] = (input[e] - max).exp();
                    sum += out[e];
                }
            }
            for t in 0..len {
                out[idx(t)] /= sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x);
        self.push("softmax", value, Op::Softmax { x, axis }, ng)
    }

    /// Normalises each row (last axis) to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, GradError> {
        let (rows, d) = self.dims(x);
        if d == 0 {
            return Err(Self::shape_err("layer_norm", "last dimension is 0".into()));
        }
        if self.nodes[gamma.0].value.numel() != d || self.nodes[beta.0].value.numel() != d {
            return Err(Self::shape_err("layer_norm", format!("affine params for d={d}")));
        }
        let input = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let dt = T::of(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &input[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng)
    }

    /// Scaled dot-product attention with `heads` heads over column blocks.
    ///
    /// `q` is `[Lq x d]`, `k` and `v` are `[Lk x d]`. `key_mask[j] == false`
    /// removes key `j` from every query's softmax. The per-head attention
    /// probabilities are retained (see [`Graph::attention_probs`]).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<&[bool]>) -> Result<Var, GradError> {
        let (lq, d) = self.dims(q);
        let (lk, dk) = self.dims(k);
        let (lv, dv) = self.dims(v);
        if dk != d || dv != d || lv != lk {
            return Err(Self::shape_err(
                "attention",
                format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Self::shape_err("attention", format!("{heads} heads do not divide {d}")));
        }
        if let Some(m) = key_mask {
            if m.len() != lk {
                return Err(Self::shape_err("attention", format!("key mask {} for {lk} keys", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(GradError::FullyMasked { op: "attention" });
            }
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..lq {
                let qrow = &qd[i * d + c0..i * d + c0 + dh];
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut max = T::neg_infinity();
                for j in 0..lk {
                    if valid(j) {
                        let s = dot(qrow, &kd[j * d + c0..j * d + c0 + dh]) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = T::zero();
                for j in 0..lk {
                    if valid(j) {
                        p[j] = (p[j] - max).exp();
                        sum += p[j];
                    }
                }
                let orow = &mut out[i * d + c0..i * d + c0 + dh];
                for j in 0..lk {
                    if valid(j) {
                        p[j] /= sum;
                        let w = p[j];
                        for (o, &vv) in orow.iter_mut().zip(&vd[j * d + c0..j * d + c0 + dh]) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push("attention", Tensor::matrix(lq, d, out)?, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Per-head probabilities `[heads x Lq x Lk]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, heads, .. } => Some((probs, *heads)),
            _ => None,
        }
    }

    /// Gathers rows of `src` (rank 2) in the given order.
    pub fn rows(&mut self, src: Var, idx: &[usize]) -> Result<Var, GradError> {
        let (m, n) = self.dims(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Self::shape_err("rows", format!("row {bad} of {m}")));
        }
        let s = self.data(src);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&s[i * n..(i + 1) * n]);
        }
        let ng = self.needs(src);
        self.push("rows", Tensor::matrix(idx.len(), n, out)?, Op::Rows { src, idx: idx.to_vec() }, ng)
    }

    /// Stacks matrices (or vectors, as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GradError> {
        let Some(&first) = parts.first() else {
            return Err(Self::shape_err("concat_rows", "no inputs".into()));
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Self::shape_err("concat_rows", format!("{c} columns vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::matrix(rows, n, out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        let ng = self.needs(a);
        self.push("reshape", value, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let (m, n) = self.dims(a);
        let d = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, GradError> {
        let s = self.data(a).iter().copied().sum::<T>();
        let ng = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, GradError> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(Self::shape_err("mean", "empty tensor".into()));
        }
        let s = self.data(a).iter().copied().sum::<T>() / T::of(n as f64);
        let ng = self.needs(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// `sum_i weights[i] * a[i, :]`, a vector of length `cols`.
    pub fn weighted_row_sum(&mut self, a: Var, weights: &[T]) -> Result<Var, GradError> {
        let (m, n) = self.dims(a);
        if weights.len() != m {
            return Err(Self::shape_err("weighted_row_sum", format!("{} weights for {m} rows", weights.len())));
        }
        let d = self.data(a);
        let mut out = vec![T::zero(); n];
        for (i, &w) in weights.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(&d[i * n..(i + 1) * n]) {
                *o += w * x;
            }
        }
        let ng = self.needs(a);
        self.push("weighted_row_sum", Tensor::vector(out), Op::WeightedRowSum(a, weights.to_vec()), ng)
    }

    /// Cosine similarity of two equally sized tensors, with each norm
    /// floored at [`COSINE_EPS`].
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var, GradError> {
        let (ud, vd) = (self.data(u), self.data(v));
        if ud.len() != vd.len() {
            return Err(Self::shape_err("cosine", format!("{:?} vs {:?}", self.shape(u), self.shape(v))));
        }
        let eps = T::of(COSINE_EPS);
        let (ru, rv) = (dot(ud, ud).sqrt(), dot(vd, vd).sqrt());
        if self.verify && (ru < eps || rv < eps) {
            self.flags.push("cosine: zero-norm input".into());
        }
        let (nu, nv) = (ru.max(eps), rv.max(eps));
        let c = dot(self.data(u), self.data(v)) / (nu * nv);
        let ng = self.needs(u) || self.needs(v);
        self.push("cosine", Tensor::scalar(c), Op::Cosine { u, v, nu, nv }, ng)
    }

    /// Pairwise cosine similarities between the rows of `x` (`[N x N]`).
    pub fn cosine_matrix(&mut self, x: Var) -> Result<Var, GradError> {
        let (n, d) = self.dims(x);
        let eps = T::of(COSINE_EPS);
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(n);
        let mut unit = vec![T::zero(); n * d];
        let mut guarded = false;
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let r = dot(row, row).sqrt();
            guarded |= r < eps;
            let nr = r.max(eps);
            norms.push(nr);
            for j in 0..d {
                unit[i * d + j] = row[j] / nr;
            }
        }
        if self.verify && guarded {
            self.flags.push("cosine_matrix: zero-norm row".into());
        }
        let mut out = vec![T::zero(); n * n];
        kernels::matmul_nt_acc(&unit, &unit, &mut out, n, d, n);
        let ng = self.needs(x);
        self.push("cosine_matrix", Tensor::matrix(n, n, out)?, Op::CosineMatrix { x, norms }, ng)
    }

    /// Reverse pass from a scalar `loss`. Gradients are added (`+=`) into
    /// the `grad` slot of every parameter reachable from the loss, so calling
    /// this repeatedly without zeroing accumulates.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<(), GradError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(GradError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads, params);
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>], params: &mut ParamStore<T>) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                for (p, &x) in params.get_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *p += x;
                }
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc(grads, a, |ga| kernels::matmul_nt_acc(g, bd, ga, m, n, k));
                self.acc(grads, b, |gb| kernels::matmul_tn_acc(ad, g, gb, m, k, n));
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).0;
                let (ad, bd) = (self.data(a), self.data(b));
                // out = a b^T: da = g b, db = g^T a
                self.acc(grads, a, |ga| kernels::matmul_acc(g, bd, ga, m, n, k));
                self.acc(grads, b, |gb| kernels::matmul_tn_acc(g, ad, gb, m, n, k));
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |ga| add_into(ga, g));
                self.acc(grads, b, |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |ga| add_into(ga, g));
                self.acc(grads, b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.data(a), self.data(b));
                self.acc(grads, a, |ga| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bv;
                    }
                });
                self.acc(grads, b, |gb| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * av;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let n = self.dims(a).1;
                self.acc(grads, a, |ga| add_into(ga, g));
                self.acc(grads, row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Affine(a, s) => {
                self.acc(grads, a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += s * y));
            }
            Op::MulConst(a, c) => {
                self.acc(grads, *a, |ga| {
                    for ((x, &gy), &cv) in ga.iter_mut().zip(g).zip(c) {
                        *x += gy * cv;
                    }
                });
            }
            &Op::Act(a, kind) => {
                let input = self.data(a);
                let out = node.value.data();
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            Activation::Gelu => kernels::gelu_grad(input[i]),
                            Activation::Sigmoid => out[i] * (T::one() - out[i]),
                            Activation::Relu => {
                                if input[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            &Op::Log(a) => {
                let input = self.data(a);
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / input[i];
                    }
                });
            }
            &Op::Abs(a) => {
                let input = self.data(a);
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        let s = if input[i] > T::zero() {
                            T::one()
                        } else if input[i] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        ga[i] += g[i] * s;
                    }
                });
            }
            &Op::Clamp(a, lo, hi) => {
                let input = self.data(a);
                self.acc(grads, a, |ga| {
                    for i in 0..ga.len() {
                        if input[i] >= lo && input[i] <= hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let (rows, cols) = self.dims(x);
                let y = node.value.data();
                let (slices, len, outer, inner) = if axis == 1 { (rows, cols, cols, 1) } else { (cols, rows, 1, cols) };
                self.acc(grads, x, |gx| {
                    for s in 0..slices {
                        let mut dotp = T::zero();
                        for t in 0..len {
                            let e = s * outer + t * inner;
                            dotp += g[e] * y[e];
                        }
                        for t in 0..len {
                            let e = s * outer + t * inner;
                            gx[e] += y[e] * (g[e] - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, d) = self.dims(*x);
                let gam = self.data(*gamma);
                self.acc(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for chunk in g.chunks(d) {
                        add_into(gb, chunk);
                    }
                });
                let dt = T::of(d as f64);
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * d + j];
                        }
                        mean_dxh /= dt;
                        mean_dxh_xh /= dt;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Rows { src, idx } => {
                let n = self.dims(*src).1;
                self.acc(grads, *src, |gs| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.acc(grads, p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::Reshape(a) => self.acc(grads, a, |ga| add_into(ga, g)),
            &Op::Transpose(a) => {
                let (m, n) = self.dims(a);
                self.acc(grads, a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Sum(a) => self.acc(grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => {
                let scale = g[0] / T::of(self.nodes[a.0].value.numel() as f64);
                self.acc(grads, a, |ga| ga.iter_mut().for_each(|x| *x += scale));
            }
            Op::WeightedRowSum(a, w) => {
                let n = self.dims(*a).1;
                self.acc(grads, *a, |ga| {
                    for (i, &wi) in w.iter().enumerate() {
                        for (x, &gy) in ga[i * n..(i + 1) * n].iter_mut().zip(g) {
                            *x += wi * gy;
                        }
                    }
                });
            }
            &Op::Cosine { u, v, nu, nv } => {
                let (ud, vd) = (self.data(u), self.data(v));
                let c = node.value.item();
                let eps = T::of(COSINE_EPS);
                let gy = g[0];
                let (ru, rv) = (dot(ud, ud).sqrt(), dot(vd, vd).sqrt());
                self.acc(grads, u, |gu| {
                    for i in 0..gu.len() {
                        let mut d = vd[i] / (nu * nv);
                        if ru >= eps {
                            d -= c * ud[i] / (nu * nu);
                        }
                        gu[i] += gy * d;
                    }
                });
                self.acc(grads, v, |gv| {
                    for i in 0..gv.len() {
                        let mut d = ud[i] / (nu * nv);
                        if rv >= eps {
                            d -= c * vd[i] / (nv * nv);
                        }
                        gv[i] += gy * d;
                    }
                });
            }
            Op::CosineMatrix { x, norms } => {
                let (n, d) = self.dims(*x);
                let xd = self.data(*x);
                let eps = T::of(COSINE_EPS);
                self.acc(grads, *x, |gx| {
                    // dU = (G + G^T) U, then project out the radial component.
                    let unit: Vec<T> = (0..n * d).map(|e| xd[e] / norms[e / d]).collect();
                    let mut sym = vec![T::zero(); n * n];
                    for i in 0..n {
                        for j in 0..n {
                            sym[i * n + j] = g[i * n + j] + g[j * n + i];
                        }
                    }
                    let mut du = vec![T::zero(); n * d];
                    kernels::matmul_acc(&sym, &unit, &mut du, n, n, d);
                    for i in 0..n {
                        let urow = &unit[i * d..(i + 1) * d];
                        let durow = &du[i * d..(i + 1) * d];
                        let raw = dot(&xd[i * d..(i + 1) * d], &xd[i * d..(i + 1) * d]).sqrt();
                        let radial = if raw >= eps { dot(durow, urow) } else { T::zero() };
                        for j in 0..d {
                            gx[i * d + j] += (durow[j] - radial * urow[j]) / norms[i];
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (lq, d) = self.dims(q);
        let lk = self.dims(k).0;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lk];
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..lq {
                let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let grow = &g[i * d + c0..i * d + c0 + dh];
                let mut rowdot = T::zero();
                for j in 0..lk {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = dot(grow, &vd[j * d + c0..j * d + c0 + dh]);
                    rowdot += p[j] * dp[j];
                    for (x, &gy) in dv[j * d + c0..j * d + c0 + dh].iter_mut().zip(grow) {
                        *x += p[j] * gy;
                    }
                }
                let qrow = &qd[i * d + c0..i * d + c0 + dh];
                for j in 0..lk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - rowdot) * scale;
                    let krow = &kd[j * d + c0..j * d + c0 + dh];
                    for t in 0..dh {
                        dq[i * d + c0 + t] += ds * krow[t];
                        dk[j * d + c0 + t] += ds * qrow[t];
                    }
                }
            }
        }
        self.acc(grads, q, |gq| add_into(gq, &dq));
        self.acc(grads, k, |gk| add_into(gk, &dk));
        self.acc(grads, v, |gv| add_into(gv, &dv));
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
