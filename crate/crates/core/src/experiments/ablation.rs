use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::TrackKind;
use crate::fusion::{EncoderVariant, Pooling};
use crate::trainer::{RunSummary, Split};

use super::{RunConfig, YesNo};

/// Row order of a round table.
pub const ROUND_SPLITS: [Split; 3] = [Split::Test, Split::Dev, Split::Train];
pub const ROUND_TASKS: [&str; 2] = ["Task_A", "Task_B"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub config: RunConfig,
}

impl Experiment {
    pub fn dir_name(&self) -> String {
        format!("exp_{}", self.id)
    }
}

struct Axes {
    id: &'static str,
    variant: EncoderVariant,
    pooling: Pooling,
    align: bool,
    contrastive: bool,
    multi_task: bool,
    backbones: &'static [TrackKind],
}

const BOTH: &[TrackKind] = &[TrackKind::ImagePatch, TrackKind::Object];
const PATCH: &[TrackKind] = &[TrackKind::ImagePatch];
const OBJECT: &[TrackKind] = &[TrackKind::Object];

const fn axes(id: &'static str, variant: EncoderVariant, pooling: Pooling, align: bool, contrastive: bool, multi_task: bool, backbones: &'static [TrackKind]) -> Axes {
    Axes { id, variant, pooling, align, contrastive, multi_task, backbones }
}

use EncoderVariant::{Multi, Shared};
use Pooling::{Cls, None as NoPool, TxtCls};

const ROUND_1: &[Axes] = &[
    axes("00", Shared, Cls, false, false, false, BOTH),
    axes("01", Shared, NoPool, false, false, false, BOTH),
    axes("02", Multi, NoPool, false, false, false, BOTH),
    axes("03", Multi, TxtCls, false, false, false, BOTH),
];
const ROUND_2: &[Axes] = &[
    axes("02", Multi, NoPool, false, false, false, BOTH),
    axes("10", Multi, NoPool, true, false, false, BOTH),
    axes("12", Multi, NoPool, false, true, false, BOTH),
    axes("13", Multi, NoPool, true, true, false, BOTH),
];
const ROUND_3: &[Axes] = &[
    axes("10", Multi, NoPool, true, false, false, BOTH),
    axes("20", Multi, NoPool, true, false, false, PATCH),
    axes("21", Multi, NoPool, true, false, false, OBJECT),
];
const ROUND_4: &[Axes] = &[
    axes("10", Multi, NoPool, true, false, false, BOTH),
    axes("30", Multi, NoPool, true, false, true, BOTH),
];

/// Configurations of ablation round `round` (1 to 4). Hyperparameters other
/// than the six axes come from `base`.
pub fn ablation_grid(round: u8, base: &RunConfig) -> Result<Vec<Experiment>> {
    let grid = match round {
        1 => ROUND_1,
        2 => ROUND_2,
        3 => ROUND_3,
        4 => ROUND_4,
        _ => return Err(Error::config(format!("round must be 1 to 4, got {round}"))),
    };
    grid.iter()
        .map(|a| {
            let config = RunConfig {
                encoder_variant: a.variant,
                pooling: a.pooling,
                proj_align: YesNo::from(a.align),
                contrastive: YesNo::from(a.contrastive),
                multi_task: YesNo::from(a.multi_task),
                backbones: a.backbones.to_vec(),
                ..base.clone()
            };
            config.model()?;
            Ok(Experiment { id: a.id.to_string(), config })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub split: Split,
    pub task: String,
    /// Max score over epochs per experiment; `None` when not evaluated.
    pub cells: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTable {
    pub round: u8,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl RoundTable {
    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let label = |r: &TableRow| format!("{} - {}", capitalized(r.split), r.task);
        let first = self.rows.iter().map(|r| label(r).len()).chain([10]).max().unwrap_or(10);
        let mut out = format!("{:<first$}", "Experiment");
        for c in &self.columns {
            out.push_str(&format!(" | {c:>6}"));
        }
        out.push('\n');
        out.push_str(&"-".repeat(first + self.columns.len() * 9));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<first$}", label(r)));
            for c in &r.cells {
                match c {
                    Some(v) => out.push_str(&format!(" | {v:>6.4}")),
                    None => out.push_str(&format!(" | {:>6}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn capitalized(split: Split) -> &'static str {
    match split {
        Split::Train => "Train",
        Split::Dev => "Dev",
        Split::Test => "Test",
    }
}

/// Reads the summaries of every experiment of a round from `dir`; fails
/// with the list of runs that are missing or incomplete.
pub fn collect_round(dir: &Path, experiments: &[Experiment]) -> Result<Vec<(String, RunSummary)>> {
    let mut done = Vec::new();
    let mut missing = Vec::new();
    for e in experiments {
        let run = dir.join(e.dir_name());
        let summary = run.join(crate::trainer::SUMMARY_FILE);
        if run.join(crate::trainer::INCOMPLETE_MARKER).exists() || !summary.exists() {
            missing.push(e.id.clone());
            continue;
        }
        let s: RunSummary = serde_json::from_slice(&std::fs::read(summary)?)?;
        if !s.complete {
            missing.push(e.id.clone());
            continue;
        }
        done.push((e.id.clone(), s));
    }
    if !missing.is_empty() {
        return Err(Error::data(format!("incomplete runs: {}", missing.join(", "))));
    }
    Ok(done)
}

/// Max score per (split, task) row and experiment column for `dataset`.
pub fn render_round_table(round: u8, runs: &[(String, RunSummary)], dataset: &str) -> RoundTable {
    let mut rows = Vec::new();
    for split in ROUND_SPLITS {
        for task in ROUND_TASKS {
            let cells = runs.iter().map(|(_, s)| s.series(dataset, split, task).and_then(|x| x.max())).collect();
            rows.push(TableRow { split, task: task.to_string(), cells });
        }
    }
    RoundTable { round, columns: runs.iter().map(|(id, _)| id.clone()).collect(), rows }
}
