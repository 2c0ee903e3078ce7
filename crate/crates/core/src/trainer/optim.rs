use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{GradError, ParamStore, Real};

/// Linear warmup from 0 to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let remaining = total_steps.saturating_sub(step) as f64;
    base_lr * remaining / total_steps.saturating_sub(warmup_steps).max(1) as f64
}

/// Optimizer steps of a run: one per full accumulation window plus one flush
/// per epoch for a trailing partial window.
pub fn optimizer_steps(batches_per_epoch: usize, accumulation_every: usize, epochs: usize) -> usize {
    let full = batches_per_epoch / accumulation_every;
    let flush = usize::from(batches_per_epoch % accumulation_every != 0);
    (full + flush) * epochs
}

pub fn warmup_steps(total_steps: usize) -> usize {
    total_steps / 10
}

/// Scales every gradient so the joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(GradError::NonFinite { op: "gradient" }.into());
    }
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}

/// Adds `wd * value` to the gradient of every parameter that opts into decay.
pub fn apply_weight_decay<T: Real>(store: &mut ParamStore<T>, wd: f64) {
    if wd == 0.0 {
        return;
    }
    let wd = T::of(wd);
    for p in store.iter_mut().filter(|p| p.decay) {
        for (g, &v) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            *g += wd * v;
        }
    }
}

/// Per-parameter accumulators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MadgradState {
    /// Weighted gradient sum.
    pub s: Vec<f64>,
    /// Weighted squared-gradient sum.
    pub v: Vec<f64>,
    /// Value at the first step.
    pub x0: Vec<f64>,
}

/// Dual-averaging optimizer with a cube-root denominator and iterate momentum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Madgrad {
    pub momentum: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub k: u64,
    pub state: Vec<MadgradState>,
}

impl Madgrad {
    pub fn new(momentum: f64, eps: f64) -> Self {
        Self { momentum, eps, k: 0, state: Vec::new() }
    }

    /// Applies one update from the current gradients. Gradients are left as is.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {lr}")));
        }
        if self.state.is_empty() {
            self.state = store
                .iter()
                .map(|p| {
                    let n = p.value.numel();
                    MadgradState { s: vec![0.0; n], v: vec![0.0; n], x0: p.value.data().iter().map(|x| x.f64()).collect() }
                })
                .collect();
        }
        if self.state.len() != store.len() {
            return Err(Error::config(format!("optimizer tracks {} parameters, store has {}", self.state.len(), store.len())));
        }
        let lambda = lr * ((self.k + 1) as f64).sqrt();
        let m = self.momentum;
        for (st, p) in self.state.iter_mut().zip(store.iter_mut()) {
            if st.x0.len() != p.value.numel() {
                return Err(Error::config(format!("optimizer state of {} has the wrong size", p.name)));
            }
            let grads = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].f64();
                if !g.is_finite() {
                    return Err(GradError::NonFinite { op: "gradient" }.into());
                }
                st.s[i] += lambda * g;
                st.v[i] += lambda * g * g;
                let z = st.x0[i] - st.s[i] / (st.v[i].cbrt() + self.eps);
                *x = T::of(m * x.f64() + (1.0 - m) * z);
            }
        }
        self.k += 1;
        Ok(())
    }
}
