use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmfuse::experiments::{
    ablation_grid, attention_summary, collect_round, embedding_export, load_splits, query_alignment, render_round_table, series_stats, write_splits,
    RunConfig,
};
use mmfuse::featurestore::{read_features, stratified_split, synth_generate, write_features, FeatureRecord, StoreError, SynthSpec};
use mmfuse::fusion::Instance;
use mmfuse::model::Model;
use mmfuse::ndgrad::ParamStore;
use mmfuse::trainer::{self, evaluate, load_checkpoint, DataSplits, RunOptions, RunSummary, TrainJob};

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Multi-modal meme classification on frozen backbone features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature container.
    GenSynth(GenSynthArgs),
    /// Stratified train/dev(/test) split of a feature container.
    Split(SplitArgs),
    /// Train one configuration into a run directory.
    Train(TrainArgs),
    /// Score a run checkpoint on one split.
    Eval(EvalArgs),
    /// Run or plan one ablation round and print its table.
    Ablation(AblationArgs),
    /// Export decoder attention summaries.
    VizAttention(VizArgs),
    /// Export decoder outputs and class queries.
    VizEmbeddings(VizArgs),
    /// Summarise per-epoch score series of runs.
    Stats(StatsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Mami,
    Fbhm,
}

#[derive(clap::Args)]
struct GenSynthArgs {
    #[arg(long, value_enum, conflicts_with = "spec", required_unless_present = "spec")]
    preset: Option<Preset>,
    /// Synthetic dataset recipe as JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 400)]
    records: usize,
    #[arg(long, default_value_t = 64)]
    text_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Train fraction of the records left after the test split.
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    /// Fraction held out as a test split.
    #[arg(long)]
    test_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Split directory; repeat for multi-task runs. The first is the primary dataset.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed epochs.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Best,
    Last,
}

#[derive(clap::Args)]
struct Source {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Split directory of the dataset to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "dev")]
    split: SplitName,
    #[arg(long, value_enum, default_value = "best")]
    checkpoint: Which,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    source: Source,
}

#[derive(clap::Args)]
struct AblationArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    round: u8,
    /// Base configuration for every non-ablated key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the experiment configurations without running them.
    #[arg(long)]
    plan: bool,
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct VizArgs {
    #[command(flatten)]
    source: Source,
    /// Task whose decoder is exported.
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct StatsArgs {
    /// Run directory; repeatable.
    #[arg(long, required = true)]
    run: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let msg = rendered
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let msg = msg.trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": msg}));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = error_code(&e);
            eprintln!("{}", json!({"error": code, "message": format!("{e:#}")}));
            ExitCode::from(if code == "config" { 2 } else { 1 })
        }
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<mmfuse::Error>() {
            return e.code();
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return e.code();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "runtime"
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablation(a) => ablation(a),
        Command::VizAttention(a) => viz(a, false),
        Command::VizEmbeddings(a) => viz(a, true),
        Command::Stats(a) => stats(a),
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = match (a.preset, &a.spec) {
        (Some(Preset::Mami), _) => SynthSpec::mami(a.records, a.text_dim, a.signal),
        (Some(Preset::Fbhm), _) => SynthSpec::fbhm(a.records, a.text_dim, a.signal),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| mmfuse::Error::Config(format!("{}: {e}", path.display())))?
        }
        (None, None) => unreachable!("clap requires one of --preset and --spec"),
    };
    let (ds, records) = synth_generate(&spec, a.seed)?;
    write_features(&a.out, &ds, &records)?;
    println!("{}", json!({"dataset": ds.name, "records": records.len(), "out": a.out}));
    Ok(())
}

fn pick(records: &[FeatureRecord], ids: &[u64]) -> Vec<FeatureRecord> {
    let keep: std::collections::HashSet<u64> = ids.iter().copied().collect();
    records.iter().filter(|r| keep.contains(&r.id)).cloned().collect()
}

fn split(a: SplitArgs) -> Result<()> {
    let (spec, records) = read_features(&a.data)?;
    let (rest, test) = match a.test_ratio {
        Some(t) => {
            let s = stratified_split(&records, 1.0 - t, a.seed)?;
            (pick(&records, &s.train), Some(pick(&records, &s.dev)))
        }
        None => (records, None),
    };
    let s = stratified_split(&rest, a.ratio, a.seed)?;
    let (train, dev) = (pick(&rest, &s.train), pick(&rest, &s.dev));
    write_splits(&a.out, &spec, &train, &dev, test.as_deref())?;
    println!("{}", json!({"train": train.len(), "dev": dev.len(), "test": test.map(|t| t.len())}));
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_json(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_data(dirs: &[PathBuf]) -> Result<Vec<DataSplits>> {
    dirs.iter().map(|d| load_splits(d).with_context(|| format!("loading {}", d.display()))).collect()
}

fn train_one(cfg: &RunConfig, data: &[DataSplits], out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let specs: Vec<_> = data.iter().map(|d| d.spec.clone()).collect();
    let job = cfg.job(&specs)?;
    Ok(trainer::run(&job, &data[..job.datasets.len()], out, opts)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = read_config(Some(&a.config))?;
    let data = load_data(&a.data)?;
    let s = train_one(&cfg, &data, &a.out, &RunOptions { stop_after: a.stop_after, resume: a.resume })?;
    println!("{}", json!({"complete": s.complete, "epochs": s.epochs_completed, "steps": s.steps, "best_epoch": s.best_epoch, "best_dev": s.best_dev}));
    Ok(())
}

fn read_job(run: &Path) -> Result<TrainJob> {
    let path = run.join(trainer::CONFIG_FILE);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?)
}

struct Loaded {
    model: Model,
    store: ParamStore<f32>,
    dataset: usize,
    instances: Vec<Instance<f32>>,
    dataset_name: String,
}

fn load_source(s: &Source) -> Result<Loaded> {
    let job = read_job(&s.run)?;
    let (model, mut store) = job.build_model()?;
    let file = match s.checkpoint {
        Which::Best => trainer::BEST_CHECKPOINT,
        Which::Last => trainer::LAST_CHECKPOINT,
    };
    let ck = s.run.join(file);
    load_checkpoint::<f32>(&ck).with_context(|| format!("loading {}", ck.display()))?.restore(&mut store)?;
    let data = load_splits(&s.data)?;
    let dataset = model
        .dataset_index(&data.spec.name)
        .ok_or_else(|| mmfuse::Error::Config(format!("the run was not trained on dataset {}", data.spec.name)))?;
    if job.datasets[dataset] != data.spec {
        return Err(mmfuse::Error::Data(format!("feature layout of {} differs from the one the run was trained on", data.spec.name)).into());
    }
    let records = match s.split {
        SplitName::Train => data.train,
        SplitName::Dev => data.dev,
        SplitName::Test => data.test.ok_or_else(|| mmfuse::Error::Data(format!("{} has no test split", s.data.display())))?,
    };
    let instances = records.iter().map(|r| Instance::from_record(&data.spec, r)).collect::<mmfuse::Result<_>>()?;
    Ok(Loaded { model, store, dataset, instances, dataset_name: data.spec.name })
}

fn eval(a: EvalArgs) -> Result<()> {
    let l = load_source(&a.source)?;
    let job = read_job(&a.source.run)?;
    for ts in evaluate(&l.model, &l.store, l.dataset, &l.instances, job.train.threshold)? {
        println!("{}", json!({"dataset": l.dataset_name, "task": ts.task, "metric": ts.metric, "score": ts.score}));
    }
    Ok(())
}

fn is_complete(dir: &Path) -> bool {
    dir.join(trainer::SUMMARY_FILE).exists() && !dir.join(trainer::INCOMPLETE_MARKER).exists()
}

fn ablation(a: AblationArgs) -> Result<()> {
    let base = read_config(a.config.as_deref())?;
    let grid = ablation_grid(a.round, &base)?;
    if a.plan {
        for e in &grid {
            println!("{}", serde_json::to_string(e)?);
        }
        return Ok(());
    }
    let Some(out) = a.out else { bail!(mmfuse::Error::Config("--out is required unless --plan is given".into())) };
    if a.data.is_empty() {
        bail!(mmfuse::Error::Config("at least one --data directory is required unless --plan is given".into()));
    }
    let data = load_data(&a.data)?;
    for e in &grid {
        let dir = out.join(e.dir_name());
        if is_complete(&dir) {
            eprintln!("{}", json!({"experiment": e.id, "status": "done"}));
            continue;
        }
        eprintln!("{}", json!({"experiment": e.id, "status": "training"}));
        train_one(&e.config, &data, &dir, &RunOptions { stop_after: None, resume: true })?;
    }
    let runs = collect_round(&out, &grid)?;
    let table = render_round_table(a.round, &runs, &data[0].spec.name);
    fs::write(out.join(format!("round{}.json", a.round)), serde_json::to_vec_pretty(&table)?)?;
    print!("{}", table.to_text());
    Ok(())
}

fn viz(a: VizArgs, embeddings: bool) -> Result<()> {
    let l = load_source(&a.source)?;
    let text = if embeddings {
        let export = embedding_export(&l.model, &l.store, l.dataset, &a.task, &l.instances)?;
        for q in query_alignment(&export) {
            eprintln!("{}", serde_json::to_string(&q)?);
        }
        export.to_jsonl()?
    } else {
        attention_summary(&l.model, &l.store, l.dataset, &a.task, &l.instances)?.to_jsonl()?
    };
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    for run in &a.run {
        let path = run.join(trainer::SUMMARY_FILE);
        let summary: RunSummary = serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
        for s in &summary.series {
            let scores: Vec<f64> = s.scores.iter().flatten().copied().collect();
            if scores.is_empty() {
                eprintln!("{}", json!({"warning": format!("{} {:?} {}: no defined scores", s.dataset, s.split, s.task)}));
                continue;
            }
            let (st, warnings) = series_stats(&scores)?;
            for w in warnings {
                eprintln!("{}", json!({"warning": format!("{} {:?} {}: {w}", s.dataset, s.split, s.task)}));
            }
            let line = json!({"run": run, "dataset": s.dataset, "split": s.split, "task": s.task, "metric": s.metric, "stats": st});
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}
