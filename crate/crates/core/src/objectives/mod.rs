//! Training objectives: binary cross-entropy per label, the projection
//! alignment loss, the contrastive embedding loss over classifier inputs, and
//! their per-task and per-dataset aggregation.
//!
//! Pair terms are symmetric, so sums over ordered pairs are computed as twice
//! the unordered sum. Batches of one instance have no pairs and contribute 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ProjectedMeans;
use crate::heads::{HeadOutput, PROB_CLAMP};
use crate::ndgrad::{Graph, Real, Tensor, Var, COSINE_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxFlags {
    pub align: bool,
    pub contrastive: bool,
}

/// Averaged loss terms of one task on one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub align: f64,
    pub contrastive: f64,
    pub task_total: f64,
    pub align_enabled: bool,
    pub contrastive_enabled: bool,
}

/// All unordered pairs `(i, j)` with `i < j`.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

pub fn bce(p: f64, y: u8) -> Result<f64> {
    if y > 1 {
        return Err(Error::data(format!("label {y} is not binary")));
    }
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

pub fn label_similarity(a: u8, b: u8) -> f64 {
    (2.0 * a as f64 - 1.0) * (2.0 * b as f64 - 1.0)
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(COSINE_EPS);
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (nu * nv)
}

/// Alignment loss of one pair. Each argument lists one vector per projected track.
pub fn align_pair(raw_i: &[&[f64]], raw_j: &[&[f64]], proj_i: &[&[f64]], proj_j: &[&[f64]]) -> Result<f64> {
    let k = raw_i.len();
    if k == 0 || raw_j.len() != k || proj_i.len() != k || proj_j.len() != k {
        return Err(Error::config("alignment needs the same non-zero number of tracks per argument"));
    }
    let total: f64 = (0..k).map(|t| (cosine(raw_i[t], raw_j[t]) - cosine(proj_i[t], proj_j[t])).abs()).sum();
    Ok(total / k as f64)
}

/// Number of MLP layers whose inputs enter the contrastive loss.
pub const MLP_DEPTH: usize = 2;

/// Contrastive loss of one pair for one class, given the inputs of every MLP layer.
pub fn contrastive_pair(h_i: &[&[f64]], h_j: &[&[f64]], s: f64) -> Result<f64> {
    if h_i.len() != MLP_DEPTH || h_j.len() != MLP_DEPTH {
        return Err(Error::config(format!("expected {MLP_DEPTH} layer inputs, got {} and {}", h_i.len(), h_j.len())));
    }
    Ok(0.5 * h_i.iter().zip(h_j).map(|(a, b)| 1.0 - s * cosine(a, b)).sum::<f64>())
}

/// Combines per-element BCE values (`n * c` of them) with per-unordered-pair
/// alignment values and per-(pair, class) contrastive values.
pub fn compose_task_total(main: &[f64], align: Option<&[f64]>, contrastive: Option<&[f64]>, n: usize, c: usize) -> Result<LossBreakdown> {
    if c == 0 {
        return Err(Error::config("task has no labels"));
    }
    if n == 0 || main.len() != n * c {
        return Err(Error::config(format!("{} BCE values for {n} instances x {c} labels", main.len())));
    }
    let ordered = (n * (n - 1)) as f64;
    let pair_mean = |vals: &[f64], per_pair: usize| -> Result<f64> {
        if vals.len() != n * (n - 1) / 2 * per_pair {
            return Err(Error::config(format!("{} pair values for a batch of {n}", vals.len())));
        }
        Ok(if n < 2 { 0.0 } else { 2.0 * vals.iter().sum::<f64>() / (ordered * per_pair as f64) })
    };
    let main = main.iter().sum::<f64>() / (n * c) as f64;
    let align_v = align.map(|a| pair_mean(a, 1)).transpose()?.unwrap_or(0.0);
    let contrastive_v = contrastive.map(|a| pair_mean(a, c)).transpose()?.unwrap_or(0.0);
    Ok(LossBreakdown {
        main,
        align: align_v,
        contrastive: contrastive_v,
        task_total: main + align_v + contrastive_v,
        align_enabled: align.is_some(),
        contrastive_enabled: contrastive.is_some(),
    })
}

pub fn dataset_loss(task_totals: &[f64]) -> Result<f64> {
    if task_totals.is_empty() {
        return Err(Error::config("dataset has no tasks"));
    }
    Ok(task_totals.iter().sum::<f64>() / task_totals.len() as f64)
}

/// `[n x n]` indicator of off-diagonal entries.
fn off_diagonal<T: Real>(n: usize) -> Tensor<T> {
    let data = (0..n * n).map(|k| if k / n == k % n { T::zero() } else { T::one() }).collect();
    Tensor::matrix(n, n, data).unwrap()
}

fn stack<T: Real>(g: &mut Graph<T>, rows: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(rows.len());
    for &r in rows {
        let n = g.value(r).numel();
        let (_, cols) = g.value(r).dims2();
        parts.push(g.reshape(r, vec![n / cols, cols])?);
    }
    Ok(g.concat_rows(&parts)?)
}

/// Mean BCE over every (instance, label) of the task.
pub fn main_term<T: Real>(g: &mut Graph<T>, logits: &[Var], targets: &[Vec<u8>]) -> Result<Var> {
    let n = logits.len();
    let c = targets.first().map_or(0, Vec::len);
    if n == 0 || c == 0 || targets.len() != n {
        return Err(Error::config(format!("{n} logit rows for {} target rows of width {c}", targets.len())));
    }
    let mut y = Vec::with_capacity(n * c);
    for t in targets {
        if t.len() != c || t.iter().any(|&v| v > 1) {
            return Err(Error::data("targets must be binary and of equal width"));
        }
        y.extend(t.iter().map(|&v| T::of(v as f64)));
    }
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let z = stack(g, logits)?;
    if g.value(z).shape() != [n, c] {
        return Err(Error::config(format!("logits {:?} do not match {n} x {c} targets", g.value(z).shape())));
    }
    let p = g.sigmoid(z)?;
    let p = g.clamp(p, T::of(PROB_CLAMP), T::of(1.0 - PROB_CLAMP))?;
    let lp = g.log(p)?;
    let q = g.affine(p, -T::one(), T::one())?;
    let lq = g.log(q)?;
    let a = g.mul_const(lp, &Tensor::matrix(n, c, y)?)?;
    let b = g.mul_const(lq, &Tensor::matrix(n, c, not_y)?)?;
    let s = g.add(a, b)?;
    let s = g.sum(s)?;
    Ok(g.scale(s, T::of(-1.0 / (n * c) as f64))?)
}

/// Alignment term over the batch; `None` for batches of one.
pub fn align_term<T: Real>(g: &mut Graph<T>, means: &[Vec<ProjectedMeans>]) -> Result<Option<Var>> {
    let n = means.len();
    if n < 2 {
        return Ok(None);
    }
    let k = means[0].len();
    if k == 0 {
        return Err(Error::config("alignment loss needs at least one projected image track"));
    }
    let mask = off_diagonal::<T>(n);
    let mut total = None;
    for t in 0..k {
        let raw: Vec<Var> = means.iter().map(|m| m[t].raw).collect();
        let proj: Vec<Var> = means.iter().map(|m| m[t].proj).collect();
        let raw = stack(g, &raw)?;
        let proj = stack(g, &proj)?;
        let cr = g.cosine_matrix(raw)?;
        let cp = g.cosine_matrix(proj)?;
        let d = g.sub(cp, cr)?;
        let d = g.abs(d)?;
        let d = g.mul_const(d, &mask)?;
        let s = g.sum(d)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.expect("k >= 1");
    Ok(Some(g.scale(total, T::of(1.0 / (k * n * (n - 1)) as f64))?))
}

/// Contrastive term over the batch; `None` for batches of one.
pub fn contrastive_term<T: Real>(g: &mut Graph<T>, outputs: &[&HeadOutput], targets: &[Vec<u8>]) -> Result<Option<Var>> {
    let n = outputs.len();
    if n < 2 {
        return Ok(None);
    }
    let c = targets[0].len();
    let ordered = (n * (n - 1)) as f64;
    let sim = |cls: usize| -> Vec<T> {
        (0..n * n)
            .map(|k| if k / n == k % n { T::zero() } else { T::of(label_similarity(targets[k / n][cls], targets[k % n][cls])) })
            .collect()
    };
    let mut total = None;
    for layer in 0..MLP_DEPTH {
        let hs: Vec<Var> = outputs.iter().map(|o| if layer == 0 { o.h0 } else { o.h1 }).collect();
        let all = stack(g, &hs)?;
        let rows = g.value(all).dims2().0 / n;
        // Σ_{i≠j,c} s_c(i,j) cos(h_i, h_j); the similarity matrices have a zero diagonal.
        let weighted = if rows == 1 {
            let mut s_sum = vec![T::zero(); n * n];
            for cls in 0..c {
                for (acc, v) in s_sum.iter_mut().zip(sim(cls)) {
                    *acc += v;
                }
            }
            let cos = g.cosine_matrix(all)?;
            let w = g.mul_const(cos, &Tensor::matrix(n, n, s_sum)?)?;
            g.sum(w)?
        } else if rows == c {
            let mut acc = None;
            for cls in 0..c {
                let idx: Vec<usize> = (0..n).map(|i| i * c + cls).collect();
                let x = g.rows(all, &idx)?;
                let cos = g.cosine_matrix(x)?;
                let w = g.mul_const(cos, &Tensor::matrix(n, n, sim(cls))?)?;
                let s = g.sum(w)?;
                acc = Some(match acc {
                    None => s,
                    Some(a) => g.add(a, s)?,
                });
            }
            acc.expect("c >= 1")
        } else {
            return Err(Error::config(format!("{rows} classifier input rows for {c} classes")));
        };
        // Σ_{i≠j,c} (1 - s cos) = C n(n-1) - weighted
        let term = g.affine(weighted, -T::one(), T::of(c as f64 * ordered))?;
        total = Some(match total {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let total = total.expect("MLP_DEPTH >= 1");
    Ok(Some(g.scale(total, T::of(0.5 / (ordered * c as f64)))?))
}

/// Task loss as a graph node plus its breakdown. `align` is the shared
/// alignment term of the batch (task independent).
pub fn task_loss<T: Real>(
    g: &mut Graph<T>,
    outputs: &[&HeadOutput],
    targets: &[Vec<u8>],
    align: Option<Var>,
    flags: AuxFlags,
) -> Result<(Var, LossBreakdown)> {
    let logits: Vec<Var> = outputs.iter().map(|o| o.logits).collect();
    let main = main_term(g, &logits, targets)?;
    let mut total = main;
    let mut br = LossBreakdown { main: g.value(main).item().f64(), align_enabled: flags.align, contrastive_enabled: flags.contrastive, ..Default::default() };
    if flags.align {
        if let Some(a) = align {
            br.align = g.value(a).item().f64();
            total = g.add(total, a)?;
        }
    }
    if flags.contrastive {
        if let Some(c) = contrastive_term(g, outputs, targets)? {
            br.contrastive = g.value(c).item().f64();
            total = g.add(total, c)?;
        }
    }
    br.task_total = g.value(total).item().f64();
    Ok((total, br))
}

/// Mean of the task totals.
pub fn dataset_loss_node<T: Real>(g: &mut Graph<T>, totals: &[Var]) -> Result<Var> {
    if totals.is_empty() {
        return Err(Error::config("dataset has no tasks"));
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::of(1.0 / totals.len() as f64))?)
}
