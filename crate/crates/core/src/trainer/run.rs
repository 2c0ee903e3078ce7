use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::featurestore::{DatasetSpec, FeatureRecord};
use crate::fusion::Instance;
use crate::layers::Fwd;
use crate::model::{Model, ModelConfig};
use crate::ndgrad::{Graph, ParamStore, Real};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::metrics::{score_a, score_b, Metric};
use super::optim::{apply_weight_decay, clip_grad_norm, lr_at, optimizer_steps, warmup_steps, Madgrad};
use super::schedule::{build_schedule, derive_rng};
use super::TrainConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOCK_FILE: &str = "run.lock";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// Everything needed to rebuild the model of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// The first dataset is the primary one: model selection uses its dev scores.
    pub datasets: Vec<DatasetSpec>,
}

impl TrainJob {
    pub fn build_model(&self) -> Result<(Model, ParamStore<f32>)> {
        Model::new(&self.model, &self.datasets, self.train.seed)
    }
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub spec: DatasetSpec,
    pub train: Vec<FeatureRecord>,
    pub dev: Vec<FeatureRecord>,
    pub test: Option<Vec<FeatureRecord>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once this many epochs are complete, leaving the run resumable.
    pub stop_after: Option<usize>,
    /// Continue from `last.ckpt` in the run directory.
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub metric: Metric,
    /// `None` when the metric is undefined on the split (for example no positive instance).
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub dataset: String,
    pub split: Split,
    pub task: String,
    pub metric: Metric,
    /// One entry per completed epoch.
    pub scores: Vec<Option<f64>>,
}

impl ScoreSeries {
    pub fn max(&self) -> Option<f64> {
        self.scores.iter().flatten().copied().reduce(f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub complete: bool,
    pub epochs_completed: usize,
    pub steps: u64,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<f64>,
    pub series: Vec<ScoreSeries>,
}

impl RunSummary {
    pub fn series(&self, dataset: &str, split: Split, task: &str) -> Option<&ScoreSeries> {
        self.series.iter().find(|s| s.dataset == dataset && s.split == split && s.task == task)
    }
}

/// Scores every task of `dataset` on `instances`.
pub fn evaluate<T: Real>(model: &Model, store: &ParamStore<T>, dataset: usize, instances: &[Instance<T>], threshold: f64) -> Result<Vec<TaskScore>> {
    let tasks = &model.datasets[dataset].tasks;
    let mut probs: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(instances.len()); tasks.len()];
    for inst in instances {
        for (t, p) in model.predict(store, dataset, inst)?.into_iter().enumerate() {
            probs[t].push(p);
        }
    }
    let mut out = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let labels: Vec<Vec<u8>> = instances.iter().map(|i| task.labels.iter().map(|&l| i.labels[l]).collect()).collect();
        let metric = Metric::for_labels(task.labels.len());
        let score = if instances.is_empty() {
            None
        } else {
            let r = match metric {
                Metric::ScoreA => {
                    let p: Vec<f64> = probs[t].iter().map(|r| r[0]).collect();
                    let y: Vec<u8> = labels.iter().map(|r| r[0]).collect();
                    score_a(&p, &y, threshold)
                }
                Metric::ScoreB => score_b(&probs[t], &labels, threshold),
            };
            match r {
                Ok(s) => Some(s),
                Err(Error::Data(_)) => None,
                Err(e) => return Err(e),
            }
        };
        out.push(TaskScore { task: task.name.clone(), metric, score });
    }
    Ok(out)
}

/// Owns the run directory for the lifetime of the run.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Progress {
    trace_len: u64,
    metrics_len: u64,
    summary: Option<RunSummary>,
}

#[derive(Default)]
struct Window {
    batches: usize,
    loss: f64,
    /// task -> (dataset, [main, align, contrastive, total], batches)
    tasks: BTreeMap<String, (String, [f64; 4], usize)>,
}

struct Dataset<'a> {
    spec: &'a DatasetSpec,
    splits: Vec<(Split, Vec<Instance<f32>>)>,
    by_id: HashMap<u64, usize>,
    train_ids: Vec<u64>,
}

fn instances(spec: &DatasetSpec, records: &[FeatureRecord]) -> Result<Vec<Instance<f32>>> {
    records.iter().map(|r| Instance::from_record(spec, r)).collect()
}

fn append(file: &mut File, value: &serde_json::Value) -> Result<()> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    file.write_all(&line)?;
    Ok(())
}

fn open_log(path: &Path, keep: Option<u64>) -> Result<File> {
    let f = OpenOptions::new().create(true).write(true).truncate(keep.is_none()).open(path)?;
    if let Some(len) = keep {
        f.set_len(len)?;
    }
    let mut f = f;
    std::io::Seek::seek(&mut f, std::io::SeekFrom::End(0))?;
    Ok(f)
}

/// Trains `job` on `data` and writes the run directory `out`.
pub fn run(job: &TrainJob, data: &[DataSplits], out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let tc = &job.train;
    tc.validate()?;
    if data.len() != job.datasets.len() || data.iter().zip(&job.datasets).any(|(d, s)| &d.spec != s) {
        return Err(Error::config("data does not match the datasets of the job"));
    }
    std::fs::create_dir_all(out)?;
    let _lock = RunLock::acquire(out)?;
    let incomplete = out.join(INCOMPLETE_MARKER);
    File::create(&incomplete)?;

    let (model, mut store) = job.build_model()?;
    let mut sets = Vec::with_capacity(data.len());
    for d in data {
        let train = instances(&d.spec, &d.train)?;
        let by_id: HashMap<u64, usize> = train.iter().enumerate().map(|(i, x)| (x.id, i)).collect();
        if by_id.len() != train.len() {
            return Err(Error::data(format!("duplicate record ids in the training split of {}", d.spec.name)));
        }
        let train_ids = train.iter().map(|x| x.id).collect();
        let mut splits = vec![(Split::Train, train), (Split::Dev, instances(&d.spec, &d.dev)?)];
        if let Some(test) = &d.test {
            splits.push((Split::Test, instances(&d.spec, test)?));
        }
        sets.push(Dataset { spec: &d.spec, splits, by_id, train_ids });
    }

    let job_json = serde_json::to_value(job)?;
    let mut opt = Madgrad::new(tc.momentum, tc.eps);
    let mut summary = RunSummary { complete: false, epochs_completed: 0, steps: 0, best_epoch: None, best_dev: None, series: Vec::new() };
    let last_path = out.join(LAST_CHECKPOINT);
    let resumed = if opts.resume && last_path.exists() {
        let ck = load_checkpoint::<f32>(&last_path)?;
        if ck.header.job != job_json {
            return Err(Error::Checkpoint("last.ckpt was written by a different configuration".into()));
        }
        ck.restore(&mut store)?;
        if let Some(o) = ck.optimizer {
            opt = o;
        }
        let progress: Progress = serde_json::from_value(ck.header.progress)?;
        summary = progress.summary.clone().ok_or_else(|| Error::Checkpoint("last.ckpt has no run progress".into()))?;
        Some(progress)
    } else {
        std::fs::write(out.join(CONFIG_FILE), serde_json::to_vec_pretty(job)?)?;
        None
    };
    let mut trace = open_log(&out.join(TRACE_FILE), resumed.as_ref().map(|p| p.trace_len))?;
    let mut metrics = open_log(&out.join(METRICS_FILE), resumed.as_ref().map(|p| p.metrics_len))?;

    let batches_per_epoch: usize = sets.iter().map(|s| s.train_ids.len().div_ceil(tc.batch_size)).sum();
    let total_steps = optimizer_steps(batches_per_epoch, tc.accumulation_every, tc.epochs);
    let warmup = warmup_steps(total_steps);
    let id_lists: Vec<&[u64]> = sets.iter().map(|s| s.train_ids.as_slice()).collect();

    for epoch in summary.epochs_completed..tc.epochs {
        let schedule = build_schedule(&id_lists, tc.batch_size, tc.seed, epoch)?;
        let mut window = Window::default();
        let last = schedule.batches.len() - 1;
        for (bi, batch) in schedule.batches.iter().enumerate() {
            let set = &sets[batch.dataset];
            let train = &set.splits[0].1;
            let members: Vec<&Instance<f32>> = batch.ids.iter().map(|id| &train[set.by_id[id]]).collect();
            let mut rng = derive_rng(tc.seed, "dropout", &[epoch as u64, bi as u64]);
            let mut g = Graph::new();
            let bl = model.batch_loss(&mut Fwd::train(&mut g, &store, &mut rng), batch.dataset, &members)?;
            g.backward(bl.loss, &mut store)?;
            window.batches += 1;
            window.loss += bl.value;
            for (name, br) in &bl.tasks {
                let e = window.tasks.entry(name.clone()).or_insert_with(|| (set.spec.name.clone(), [0.0; 4], 0));
                for (acc, v) in e.1.iter_mut().zip([br.main, br.align, br.contrastive, br.task_total]) {
                    *acc += v;
                }
                e.2 += 1;
            }
            if window.batches == tc.accumulation_every || bi == last {
                let lr = lr_at(opt.k as usize, warmup, total_steps, tc.lr);
                let norm = clip_grad_norm(&mut store, tc.clip_norm)?;
                apply_weight_decay(&mut store, tc.weight_decay);
                opt.step(&mut store, lr)?;
                store.zero_grad();
                let tasks: Vec<_> = window
                    .tasks
                    .iter()
                    .map(|(task, (ds, s, n))| {
                        let n = *n as f64;
                        json!({"dataset": ds, "task": task, "main": s[0] / n, "align": s[1] / n, "contrastive": s[2] / n, "total": s[3] / n})
                    })
                    .collect();
                let line = json!({
                    "step": opt.k, "epoch": epoch, "lr": lr, "grad_norm": norm,
                    "batches": window.batches, "loss": window.loss / window.batches as f64, "tasks": tasks,
                });
                append(&mut trace, &line)?;
                window = Window::default();
            }
        }

        let mut dev_scores = Vec::new();
        for (di, set) in sets.iter().enumerate() {
            for (split, insts) in &set.splits {
                for ts in evaluate(&model, &store, di, insts, tc.threshold)? {
                    let pos = match summary.series.iter().position(|s| s.dataset == set.spec.name && s.split == *split && s.task == ts.task) {
                        Some(p) => p,
                        None => {
                            summary.series.push(ScoreSeries { dataset: set.spec.name.clone(), split: *split, task: ts.task.clone(), metric: ts.metric, scores: Vec::new() });
                            summary.series.len() - 1
                        }
                    };
                    let series = &mut summary.series[pos];
                    series.scores.push(ts.score);
                    append(
                        &mut metrics,
                        &json!({"epoch": epoch, "dataset": set.spec.name, "split": split, "task": ts.task, "metric": ts.metric, "score": ts.score, "max": series.max()}),
                    )?;
                    if di == 0 && *split == Split::Dev {
                        dev_scores.extend(ts.score);
                    }
                }
            }
        }
        trace.flush()?;
        metrics.flush()?;
        summary.epochs_completed = epoch + 1;
        summary.steps = opt.k;
        if !dev_scores.is_empty() {
            let mean = dev_scores.iter().sum::<f64>() / dev_scores.len() as f64;
            if summary.best_dev.is_none_or(|b| mean > b) {
                summary.best_dev = Some(mean);
                summary.best_epoch = Some(epoch);
                let progress = serde_json::to_value(Progress::default())?;
                save_checkpoint(&out.join(BEST_CHECKPOINT), &store, None, epoch + 1, &job_json, &progress)?;
            }
        }
        let progress = Progress { trace_len: trace.metadata()?.len(), metrics_len: metrics.metadata()?.len(), summary: Some(summary.clone()) };
        save_checkpoint(&last_path, &store, Some(&opt), epoch + 1, &job_json, &serde_json::to_value(&progress)?)?;
        if opts.stop_after.is_some_and(|n| epoch + 1 >= n) && epoch + 1 < tc.epochs {
            return Ok(summary);
        }
    }
    summary.complete = true;
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    std::fs::remove_file(&incomplete)?;
    Ok(summary)
}
