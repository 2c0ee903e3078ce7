//! The full classifier: shared fusion, shared class queries and decoder, and
//! one head per task across all datasets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::DatasetSpec;
use crate::fusion::{AssembledSequence, Fusion, FusionConfig, Instance, Pooled, Pooling};
use crate::heads::{HeadConfig, HeadMode, HeadOutput, Heads};
use crate::layers::{Fwd, Init};
use crate::ndgrad::{ParamStore, Real, Var};
use crate::objectives::{align_term, dataset_loss_node, task_loss, AuxFlags, LossBreakdown};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub aux: AuxFlags,
}

impl ModelConfig {
    /// Pooling decides the head: CLS pooling feeds the multi-head MLP, the
    /// other modes feed the decoder.
    pub fn head_mode(&self) -> HeadMode {
        match self.fusion.pooling {
            Pooling::Cls => HeadMode::MultiHead,
            Pooling::None | Pooling::TxtCls => HeadMode::SharedSingle,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelTask {
    pub name: String,
    /// Index into `Heads::tasks`.
    pub head: usize,
    /// Indices into the dataset's label vector, in task order.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ModelDataset {
    pub spec: DatasetSpec,
    pub tasks: Vec<ModelTask>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub fusion: Fusion,
    pub heads: Heads,
    pub datasets: Vec<ModelDataset>,
}

/// Forward results for one instance.
#[derive(Clone, Debug)]
pub struct InstanceOutput {
    pub seq: AssembledSequence,
    pub pooled: Pooled,
    /// One entry per task of the instance's dataset.
    pub tasks: Vec<HeadOutput>,
}

pub struct BatchLoss {
    /// Mean of the task totals.
    pub loss: Var,
    pub value: f64,
    pub tasks: Vec<(String, LossBreakdown)>,
    pub outputs: Vec<InstanceOutput>,
}

/// Label names of all datasets, first occurrence order.
pub fn global_labels(datasets: &[DatasetSpec]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for ds in datasets {
        for l in &ds.label_names {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
    }
    out
}

impl Model {
    /// Builds the model and initializes its parameters from `seed`.
    pub fn new<T: Real>(cfg: &ModelConfig, datasets: &[DatasetSpec], seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(cfg, datasets, &mut Init { store: &mut store, rng: &mut rng })?;
        Ok((model, store))
    }

    pub fn build<T: Real>(cfg: &ModelConfig, datasets: &[DatasetSpec], init: &mut Init<T>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::config("at least one dataset is required"));
        }
        for (i, ds) in datasets.iter().enumerate() {
            ds.validate()?;
            if datasets[..i].iter().any(|o| o.name == ds.name) {
                return Err(Error::config(format!("dataset {} given twice", ds.name)));
            }
        }
        let fusion = Fusion::new(init, &cfg.fusion, datasets)?;
        let labels = global_labels(datasets);
        let mut head_cfg = cfg.head.clone();
        head_cfg.mode = cfg.head_mode();
        let task_defs: Vec<(String, Vec<String>)> =
            datasets.iter().flat_map(|ds| ds.tasks.iter().map(|t| (t.name.clone(), t.labels.clone()))).collect();
        let heads = Heads::new(init, &head_cfg, cfg.fusion.hidden_dim, &labels, &task_defs)?;
        let mut ds_out = Vec::new();
        for ds in datasets {
            let tasks = ds
                .tasks
                .iter()
                .map(|t| ModelTask {
                    name: t.name.clone(),
                    head: heads.task_index(&t.name).expect("head per task"),
                    labels: t.labels.iter().map(|l| ds.label_index(l).expect("validated")).collect(),
                })
                .collect();
            ds_out.push(ModelDataset { spec: ds.clone(), tasks });
        }
        let mut cfg = cfg.clone();
        cfg.head = head_cfg;
        Ok(Self { cfg, fusion, heads, datasets: ds_out })
    }

    pub fn dataset_index(&self, name: &str) -> Option<usize> {
        self.datasets.iter().position(|d| d.spec.name == name)
    }

    pub fn forward_instance<T: Real>(&self, f: &mut Fwd<T>, dataset: usize, inst: &Instance<T>) -> Result<InstanceOutput> {
        let (seq, pooled) = self.fusion.forward(f, inst)?;
        let mut tasks = Vec::new();
        for t in &self.datasets[dataset].tasks {
            tasks.push(self.heads.forward(f, &pooled, t.head)?);
        }
        Ok(InstanceOutput { seq, pooled, tasks })
    }

    /// Forward pass and dataset loss of one dataset-pure batch.
    pub fn batch_loss<T: Real>(&self, f: &mut Fwd<T>, dataset: usize, batch: &[&Instance<T>]) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let ds = &self.datasets[dataset];
        let mut outputs = Vec::with_capacity(batch.len());
        for inst in batch {
            if inst.labels.len() != ds.spec.label_names.len() {
                return Err(Error::data(format!("record {} has {} labels, dataset {} expects {}", inst.id, inst.labels.len(), ds.spec.name, ds.spec.label_names.len())));
            }
            outputs.push(self.forward_instance(f, dataset, inst)?);
        }
        let aux = self.cfg.aux;
        let align = if aux.align {
            let means: Vec<_> = outputs.iter().map(|o| o.seq.projected.clone()).collect();
            align_term(f.g, &means)?
        } else {
            None
        };
        let mut totals = Vec::new();
        let mut breakdowns = Vec::new();
        for (ti, task) in ds.tasks.iter().enumerate() {
            let outs: Vec<&HeadOutput> = outputs.iter().map(|o| &o.tasks[ti]).collect();
            let targets: Vec<Vec<u8>> = batch.iter().map(|inst| task.labels.iter().map(|&l| inst.labels[l]).collect()).collect();
            let (total, br) = task_loss(f.g, &outs, &targets, align, aux)?;
            totals.push(total);
            breakdowns.push((task.name.clone(), br));
        }
        let loss = dataset_loss_node(f.g, &totals)?;
        let value = f.g.value(loss).item().f64();
        Ok(BatchLoss { loss, value, tasks: breakdowns, outputs })
    }

    /// Per-task probabilities for one instance, in eval mode.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, dataset: usize, inst: &Instance<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = crate::ndgrad::Graph::new();
        let out = self.forward_instance(&mut Fwd::eval(&mut g, store), dataset, inst)?;
        Ok(out
            .tasks
            .iter()
            .map(|h| crate::heads::probabilities(&g.value(h.logits).to_f64_vec()))
            .collect())
    }
}
