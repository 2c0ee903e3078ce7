//! Classification heads: a per-task multi-output MLP over a pooled vector, or
//! a shared transformer decoder over learnable class queries followed by a
//! per-task single-output MLP applied to every class row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Pooled;
use crate::layers::{Decoder, DecoderAttn, Fwd, Init, Linear, StackShape};
use crate::ndgrad::{Activation, ParamId, Real, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// One MLP per task with one output per label, fed the pooled vector.
    MultiHead,
    /// One MLP per task with a single output, shared across class rows.
    SharedSingle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub mode: HeadMode,
    pub mlp_hidden: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mode: HeadMode::SharedSingle,
            mlp_hidden: 768,
            decoder_layers: 6,
            decoder_heads: 8,
            ffn_mult: 4,
            dropout: 0.1,
            activation: Activation::Gelu,
        }
    }
}

/// Two affine layers with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

/// Inputs of both MLP layers and the logits, row-aligned.
#[derive(Clone, Copy, Debug)]
pub struct MlpOut {
    pub h0: Var,
    pub h1: Var,
    pub logits: Var,
}

impl Mlp {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self { l1: Linear::new(init, &format!("{name}.fc1"), d_in, hidden), l2: Linear::new(init, &format!("{name}.fc2"), hidden, d_out) }
    }

    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, x: Var) -> Result<MlpOut> {
        let a = self.l1.forward(f, x)?;
        let h1 = f.g.gelu(a)?;
        let logits = self.l2.forward(f, h1)?;
        Ok(MlpOut { h0: x, h1, logits })
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: String,
    pub mode: HeadMode,
    /// Global label indices, in the task's declared order.
    pub labels: Vec<usize>,
    pub mlp: Mlp,
}

/// Result of classifying one instance for one task.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `[C]`
    pub logits: Var,
    /// MLP inputs: one row shared by all classes (multi-head) or one row per class.
    pub h0: Var,
    pub h1: Var,
    /// Decoder output `[C x hidden_dim]`.
    pub class_outputs: Option<Var>,
    pub attn: Vec<DecoderAttn>,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub cfg: HeadConfig,
    /// All label names across datasets, in declaration order.
    pub label_names: Vec<String>,
    /// `[labels x hidden_dim]`, decoder mode only.
    pub queries: Option<ParamId>,
    pub decoder: Option<Decoder>,
    pub tasks: Vec<TaskHead>,
}

impl Heads {
    /// `tasks` pairs task names with their label names.
    pub fn new<T: Real>(
        init: &mut Init<T>,
        cfg: &HeadConfig,
        hidden: usize,
        label_names: &[String],
        tasks: &[(String, Vec<String>)],
    ) -> Result<Self> {
        if cfg.mlp_hidden == 0 {
            return Err(Error::config("mlp_hidden must be >= 1"));
        }
        let (queries, decoder) = match cfg.mode {
            HeadMode::MultiHead => (None, None),
            HeadMode::SharedSingle => {
                if cfg.decoder_heads == 0 || hidden % cfg.decoder_heads != 0 {
                    return Err(Error::config(format!("hidden_dim {hidden} not divisible by decoder heads {}", cfg.decoder_heads)));
                }
                let shape = StackShape {
                    layers: cfg.decoder_layers,
                    heads: cfg.decoder_heads,
                    ffn_width: cfg.ffn_mult * hidden,
                    dropout: cfg.dropout,
                    activation: cfg.activation,
                };
                let q = init.normal("heads.queries", label_names.len(), hidden, true);
                (Some(q), Some(Decoder::new(init, "heads.decoder", hidden, &shape)))
            }
        };
        let mut heads = Vec::with_capacity(tasks.len());
        for (i, (task, labels)) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|(t, _)| t == task) {
                return Err(Error::config(format!("task name {task} is used twice")));
            }
            let labels = label_indices(label_names, labels)?;
            let out = if cfg.mode == HeadMode::MultiHead { labels.len() } else { 1 };
            let mlp = Mlp::new(init, &format!("heads.task.{task}"), hidden, cfg.mlp_hidden, out);
            heads.push(TaskHead { task: task.clone(), mode: cfg.mode, labels, mlp });
        }
        Ok(Self { cfg: cfg.clone(), label_names: label_names.to_vec(), queries, decoder, tasks: heads })
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.task == task)
    }

    pub fn classify_pooled<T: Real>(&self, f: &mut Fwd<T>, pooled: Var, head: &TaskHead) -> Result<HeadOutput> {
        if head.mode != HeadMode::MultiHead {
            return Err(Error::config(format!("task {} uses the decoder head, not the pooled MLP", head.task)));
        }
        let out = head.mlp.forward(f, pooled)?;
        let logits = f.g.reshape(out.logits, vec![head.labels.len()])?;
        Ok(HeadOutput { logits, h0: out.h0, h1: out.h1, class_outputs: None, attn: Vec::new() })
    }

    /// Runs the decoder on the queries of `labels`; returns `[C x hidden]`
    /// outputs and the per-layer attention nodes.
    pub fn decode_classes<T: Real>(
        &self,
        f: &mut Fwd<T>,
        source: Var,
        source_mask: &[bool],
        labels: &[usize],
    ) -> Result<(Var, Vec<DecoderAttn>)> {
        let (Some(q), Some(dec)) = (self.queries, &self.decoder) else {
            return Err(Error::config("model has no decoder head"));
        };
        if labels.is_empty() {
            return Err(Error::config("decoder needs at least one class"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.label_names.len()) {
            return Err(Error::config(format!("label index {bad} out of range")));
        }
        let table = f.p(q);
        let target = f.g.rows(table, labels)?;
        dec.forward(f, target, source, source_mask)
    }

    pub fn classify_shared<T: Real>(&self, f: &mut Fwd<T>, class_outputs: Var, head: &TaskHead) -> Result<MlpOut> {
        if head.mode != HeadMode::SharedSingle {
            return Err(Error::config(format!("task {} uses the pooled MLP, not the decoder head", head.task)));
        }
        head.mlp.forward(f, class_outputs)
    }

    /// Classifies one instance for the task at `task` (index into `tasks`).
    pub fn forward<T: Real>(&self, f: &mut Fwd<T>, pooled: &Pooled, task: usize) -> Result<HeadOutput> {
        let head = &self.tasks[task];
        match (pooled, head.mode) {
            (Pooled::Vector(v), HeadMode::MultiHead) => self.classify_pooled(f, *v, head),
            (Pooled::Sequence { x, mask, .. }, HeadMode::SharedSingle) => {
                let (outs, attn) = self.decode_classes(f, *x, mask, &head.labels)?;
                let m = self.classify_shared(f, outs, head)?;
                let logits = f.g.reshape(m.logits, vec![head.labels.len()])?;
                Ok(HeadOutput { logits, h0: m.h0, h1: m.h1, class_outputs: Some(outs), attn })
            }
            _ => Err(Error::config(format!("pooling output does not fit the {:?} head of task {}", head.mode, head.task))),
        }
    }
}

/// Resolves label names to global indices.
pub fn label_indices(label_names: &[String], labels: &[String]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| label_names.iter().position(|n| n == l).ok_or_else(|| Error::config(format!("unknown label {l}"))))
        .collect()
}

/// Elementwise sigmoid clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| crate::ndgrad::sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect()
}

#[cfg(test)]
mod tests;
