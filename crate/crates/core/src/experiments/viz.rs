use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Instance, Pooled, SpanKind};
use crate::heads::HeadMode;
use crate::layers::{head_mean, Fwd};
use crate::model::Model;
use crate::ndgrad::{Graph, ParamStore, Real};
use crate::objectives::cosine;

/// Mean decoder attention of one task over a set of instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub task: String,
    pub classes: Vec<String>,
    /// Source segments: track names, plus `cls` for the global token of the shared layout.
    pub columns: Vec<String>,
    pub instances: usize,
    /// `[layer][class][class]`, averaged over heads and instances.
    pub self_attn: Vec<Vec<Vec<f64>>>,
    /// `[layer][class][column]`: weights summed within each segment, then averaged.
    pub cross_attn: Vec<Vec<Vec<f64>>>,
}

impl AttentionSummary {
    /// One JSON object per decoder layer.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (l, (s, c)) in self.self_attn.iter().zip(&self.cross_attn).enumerate() {
            let line = serde_json::json!({
                "layer": l, "task": self.task, "classes": self.classes, "columns": self.columns,
                "instances": self.instances, "self_attn": s, "cross_attn": c,
            });
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn decoder_task(model: &Model, dataset: usize, task: &str) -> Result<usize> {
    if model.cfg.head.mode != HeadMode::SharedSingle {
        return Err(Error::config("the model uses the pooled multi-head classifier, which has no decoder"));
    }
    let ds = model.datasets.get(dataset).ok_or_else(|| Error::config(format!("no dataset {dataset}")))?;
    ds.tasks
        .iter()
        .position(|t| t.name == task)
        .ok_or_else(|| Error::config(format!("dataset {} has no task {task}", ds.spec.name)))
}

fn column_name(kind: SpanKind) -> String {
    match kind {
        SpanKind::Track(k) => k.as_str().to_string(),
        SpanKind::GlobalCls => "cls".to_string(),
    }
}

/// Streams head-averaged self- and cross-attention of `task` over `instances`.
pub fn attention_summary<T: Real>(model: &Model, store: &ParamStore<T>, dataset: usize, task: &str, instances: &[Instance<T>]) -> Result<AttentionSummary> {
    let ti = decoder_task(model, dataset, task)?;
    let mtask = &model.datasets[dataset].tasks[ti];
    let c = mtask.labels.len();
    let layers = model.cfg.head.decoder_layers;
    let mut columns: Vec<String> = Vec::new();
    let mut self_sum = vec![vec![vec![0.0; c]; c]; layers];
    let mut cross_sum: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); c]; layers];
    for inst in instances {
        let mut g = Graph::new();
        let out = model.forward_instance(&mut Fwd::eval(&mut g, store), dataset, inst)?;
        let Pooled::Sequence { spans, .. } = &out.pooled else {
            return Err(Error::config("decoder head without a pooled sequence"));
        };
        let col: Vec<usize> = spans
            .iter()
            .map(|s| {
                let name = column_name(s.kind);
                columns.iter().position(|x| *x == name).unwrap_or_else(|| {
                    columns.push(name);
                    columns.len() - 1
                })
            })
            .collect();
        for (l, attn) in out.tasks[ti].attn.iter().enumerate() {
            let sa = head_mean(&g, attn.self_attn).ok_or_else(|| Error::config("self-attention probabilities were not saved"))?;
            let ca = head_mean(&g, attn.cross_attn).ok_or_else(|| Error::config("cross-attention probabilities were not saved"))?;
            let src = ca.len() / c;
            for q in 0..c {
                for (k, v) in self_sum[l][q].iter_mut().enumerate() {
                    *v += sa[q * c + k];
                }
                let row = &mut cross_sum[l][q];
                row.resize(columns.len(), 0.0);
                for (s, &j) in spans.iter().zip(&col) {
                    row[j] += ca[q * src + s.start..q * src + s.start + s.len].iter().sum::<f64>();
                }
            }
        }
    }
    let n = instances.len().max(1) as f64;
    let scale = |m: &mut Vec<Vec<Vec<f64>>>, width: usize| {
        for row in m.iter_mut().flatten() {
            row.resize(width, 0.0);
            row.iter_mut().for_each(|v| *v /= n);
        }
    };
    scale(&mut self_sum, c);
    scale(&mut cross_sum, columns.len());
    let classes = mtask.labels.iter().map(|&l| model.datasets[dataset].spec.label_names[l].clone()).collect();
    Ok(AttentionSummary { task: task.to_string(), classes, columns, instances: instances.len(), self_attn: self_sum, cross_attn: cross_sum })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: u64,
    pub class: usize,
    pub label: u8,
    pub output: Vec<f64>,
}

/// Decoder output per (instance, class) and the class query vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub task: String,
    pub classes: Vec<String>,
    pub queries: Vec<Vec<f64>>,
    pub points: Vec<EmbeddingPoint>,
}

impl EmbeddingExport {
    /// One `query` line per class followed by one `output` line per point.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (c, q) in self.queries.iter().enumerate() {
            let line = serde_json::json!({"type": "query", "task": self.task, "class": c, "name": self.classes[c], "vector": q});
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        for p in &self.points {
            let line = serde_json::json!({"type": "output", "id": p.id, "class": p.class, "name": self.classes[p.class], "label": p.label, "vector": p.output});
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn embedding_export<T: Real>(model: &Model, store: &ParamStore<T>, dataset: usize, task: &str, instances: &[Instance<T>]) -> Result<EmbeddingExport> {
    let ti = decoder_task(model, dataset, task)?;
    let mtask = &model.datasets[dataset].tasks[ti];
    let queries_id = model.heads.queries.ok_or_else(|| Error::config("model has no class queries"))?;
    let table = store.value(queries_id);
    let queries = model.heads.tasks[mtask.head].labels.iter().map(|&l| table.row(l).iter().map(|v| v.f64()).collect()).collect();
    let mut points = Vec::with_capacity(instances.len() * mtask.labels.len());
    for inst in instances {
        let mut g = Graph::new();
        let out = model.forward_instance(&mut Fwd::eval(&mut g, store), dataset, inst)?;
        let outputs = out.tasks[ti].class_outputs.ok_or_else(|| Error::config("head produced no class outputs"))?;
        let v = g.value(outputs);
        for (c, &l) in mtask.labels.iter().enumerate() {
            points.push(EmbeddingPoint { id: inst.id, class: c, label: inst.labels[l], output: v.row(c).iter().map(|x| x.f64()).collect() });
        }
    }
    let classes = mtask.labels.iter().map(|&l| model.datasets[dataset].spec.label_names[l].clone()).collect();
    Ok(EmbeddingExport { task: task.to_string(), classes, queries, points })
}

/// Mean cosine between each class query and the decoder outputs of its
/// positive and negative instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryAlignment {
    pub class: String,
    pub positive: Option<f64>,
    pub negative: Option<f64>,
}

pub fn query_alignment(export: &EmbeddingExport) -> Vec<QueryAlignment> {
    (0..export.classes.len())
        .map(|c| {
            let mean = |label: u8| {
                let v: Vec<f64> = export.points.iter().filter(|p| p.class == c && p.label == label).map(|p| cosine(&export.queries[c], &p.output)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            QueryAlignment { class: export.classes[c].clone(), positive: mean(1), negative: mean(0) }
        })
        .collect()
}
