//! Frozen backbone features: dataset and track metadata, the on-disk
//! container, no-object masking of detector boxes, synthetic data and
//! stratified splitting.

mod container;
mod mask;
mod split;
mod synth;

use serde::{Deserialize, Serialize};

pub use container::{read_features, write_features, MANIFEST_FILE, RECORDS_FILE};
pub use mask::{detr_object_mask, object_mask, FALLBACK_KEEP};
pub use split::{stratified_split, Split};
pub use synth::{synth_generate, LabelPrior, SynthSpec};

/// Token counts of the reference backbones.
pub const IMAGE_PATCH_TOKENS: usize = 5;
pub const OBJECT_TOKENS: usize = 100;
pub const TEXT_TOKENS: usize = 120;
pub const DETR_LOGIT_CLASSES: usize = 92;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated records file at byte {0}")]
    Truncated(usize),
    #[error("records checksum does not match manifest")]
    Checksum,
    #[error("record inconsistent with dataset spec: {0}")]
    Inconsistent(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite detector logits")]
    NonFiniteLogits,
    #[error("config: {0}")]
    Config(String),
}

impl StoreError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Io(_) => "io",
            StoreError::Manifest(_) => "manifest",
            StoreError::BadMagic(_) => "bad_magic",
            StoreError::Version(_) => "version",
            StoreError::Truncated(_) => "truncated",
            StoreError::Checksum => "checksum",
            StoreError::Inconsistent(_) => "inconsistent",
            StoreError::InvalidSpec(_) => "invalid_spec",
            StoreError::NonFiniteLogits => "non_finite_logits",
            StoreError::Config(_) => "config",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackKind {
    ImagePatch,
    Object,
    Text,
}

impl TrackKind {
    /// Fixed sequence order of tracks in a fused sequence.
    pub const ALL: [TrackKind; 3] = [TrackKind::ImagePatch, TrackKind::Object, TrackKind::Text];

    pub fn index(self) -> usize {
        match self {
            TrackKind::ImagePatch => 0,
            TrackKind::Object => 1,
            TrackKind::Text => 2,
        }
    }

    pub fn default_max_len(self) -> usize {
        match self {
            TrackKind::ImagePatch => IMAGE_PATCH_TOKENS,
            TrackKind::Object => OBJECT_TOKENS,
            TrackKind::Text => TEXT_TOKENS,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrackKind::ImagePatch => "IMAGE_PATCH",
            TrackKind::Object => "OBJECT",
            TrackKind::Text => "TEXT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub kind: TrackKind,
    pub dim: usize,
    pub max_len: usize,
    pub has_logits: bool,
    #[serde(default)]
    pub logit_classes: usize,
    #[serde(default)]
    pub no_object_index: Option<usize>,
}

impl TrackSpec {
    pub fn new(name: impl Into<String>, kind: TrackKind, dim: usize) -> Self {
        Self { name: name.into(), kind, dim, max_len: kind.default_max_len(), has_logits: false, logit_classes: 0, no_object_index: None }
    }

    /// Detector object track with `classes` logits, the last one being no-object.
    pub fn detector(name: impl Into<String>, dim: usize, classes: usize) -> Self {
        Self {
            has_logits: true,
            logit_classes: classes,
            no_object_index: Some(classes - 1),
            ..Self::new(name, TrackKind::Object, dim)
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidSpec(format!("track {}: {m}", self.name)));
        if self.dim == 0 || self.max_len == 0 {
            return bad("dim and max_len must be >= 1".into());
        }
        if self.has_logits {
            if self.kind != TrackKind::Object {
                return bad("only OBJECT tracks carry logits".into());
            }
            match self.no_object_index {
                Some(i) if i < self.logit_classes => {}
                _ => return bad(format!("no_object_index {:?} outside {} classes", self.no_object_index, self.logit_classes)),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub labels: Vec<String>,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, labels: &[&str]) -> Self {
        Self { name: name.into(), labels: labels.iter().map(|s| s.to_string()).collect() }
    }

    pub fn is_single_label(&self) -> bool {
        self.labels.len() == 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub label_names: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    pub tracks: Vec<TrackSpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::InvalidSpec(format!("dataset {}: {m}", self.name)));
        if self.label_names.is_empty() {
            return bad("no labels".into());
        }
        for (i, l) in self.label_names.iter().enumerate() {
            if self.label_names[..i].contains(l) {
                return bad(format!("duplicate label {l}"));
            }
        }
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return bad(format!("duplicate task {}", t.name));
            }
            if t.labels.is_empty() {
                return bad(format!("task {} has no labels", t.name));
            }
            for (j, l) in t.labels.iter().enumerate() {
                if !self.label_names.contains(l) {
                    return bad(format!("task {} uses unknown label {l}", t.name));
                }
                if t.labels[..j].contains(l) {
                    return bad(format!("task {} repeats label {l}", t.name));
                }
            }
        }
        for (i, tr) in self.tracks.iter().enumerate() {
            tr.validate()?;
            if self.tracks[..i].iter().any(|o| o.kind == tr.kind) {
                return bad(format!("two {} tracks", tr.kind.as_str()));
            }
        }
        Ok(())
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_names.iter().position(|l| l == name)
    }

    pub fn track_index(&self, kind: TrackKind) -> Option<usize> {
        self.tracks.iter().position(|t| t.kind == kind)
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

/// One track of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackData {
    /// `seq_len x dim`, row-major.
    pub tokens: Vec<f32>,
    pub mask: Vec<bool>,
    /// `seq_len x logit_classes`, for tracks with logits.
    pub logits: Option<Vec<f32>>,
}

impl TrackData {
    pub fn seq_len(&self) -> usize {
        self.mask.len()
    }

    pub fn token(&self, i: usize, dim: usize) -> &[f32] {
        &self.tokens[i * dim..(i + 1) * dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    /// 0/1 per dataset label, in `label_names` order.
    pub labels: Vec<u8>,
    /// One entry per dataset track, in spec order.
    pub tracks: Vec<TrackData>,
}

impl FeatureRecord {
    pub fn validate(&self, spec: &DatasetSpec) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::Inconsistent(format!("record {}: {m}", self.id)));
        if self.labels.len() != spec.label_names.len() {
            return bad(format!("{} labels, expected {}", self.labels.len(), spec.label_names.len()));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return bad("labels must be 0 or 1".into());
        }
        if self.tracks.len() != spec.tracks.len() {
            return bad(format!("{} tracks, expected {}", self.tracks.len(), spec.tracks.len()));
        }
        for (t, ts) in self.tracks.iter().zip(&spec.tracks) {
            let n = t.seq_len();
            if n > ts.max_len {
                return bad(format!("{} seq_len {n} exceeds max_len {}", ts.name, ts.max_len));
            }
            if t.tokens.len() != n * ts.dim {
                return bad(format!("{} has {} token values for {n}x{}", ts.name, t.tokens.len(), ts.dim));
            }
            match (&t.logits, ts.has_logits) {
                (Some(l), true) if l.len() == n * ts.logit_classes => {}
                (None, false) => {}
                _ => return bad(format!("{} logits do not match spec", ts.name)),
            }
            if matches!(ts.kind, TrackKind::Text | TrackKind::ImagePatch) && !t.mask.iter().any(|&m| m) {
                return bad(format!("{} has no valid token", ts.name));
            }
        }
        Ok(())
    }

    pub fn label(&self, spec: &DatasetSpec, name: &str) -> Option<u8> {
        spec.label_index(name).map(|i| self.labels[i])
    }
}

#[cfg(test)]
mod tests;
