use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mask::object_mask;
use super::{DatasetSpec, FeatureRecord, StoreError, TaskSpec, TrackData, TrackKind, TrackSpec, DETR_LOGIT_CLASSES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPrior {
    pub name: String,
    /// P(label = 1), conditional on the parent label when one is set.
    pub prior: f64,
    /// Magnitude of the planted direction for this label.
    pub signal: f64,
}

/// Recipe for a learnable synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub labels: Vec<LabelPrior>,
    pub tasks: Vec<TaskSpec>,
    /// Every other label can only be 1 when this label is 1.
    #[serde(default)]
    pub parent: Option<String>,
    pub records: usize,
    pub image_patch_dim: usize,
    pub object_dim: usize,
    pub text_dim: usize,
    pub image_patches: usize,
    pub object_boxes: usize,
    pub text_len: (usize, usize),
    pub logit_classes: usize,
    /// Per-box probability that the detector predicts no-object.
    pub no_object_fraction: f64,
    /// Per-record probability that every box is no-object.
    pub all_no_object_fraction: f64,
    /// Per-token probability of carrying the planted signal.
    pub planted_fraction: f64,
    pub noise: f64,
}

impl SynthSpec {
    fn base(name: &str, records: usize, text_dim: usize, labels: Vec<LabelPrior>, tasks: Vec<TaskSpec>) -> Self {
        Self {
            name: name.into(),
            labels,
            tasks,
            parent: None,
            records,
            image_patch_dim: 24,
            object_dim: 20,
            text_dim,
            image_patches: TrackKind::ImagePatch.default_max_len(),
            object_boxes: TrackKind::Object.default_max_len(),
            text_len: (8, 40),
            logit_classes: DETR_LOGIT_CLASSES,
            no_object_fraction: 0.9,
            all_no_object_fraction: 0.05,
            planted_fraction: 0.5,
            noise: 1.0,
        }
    }

    /// Five-label misogyny-style dataset with its three task configurations.
    pub fn mami(records: usize, text_dim: usize, signal: f64) -> Self {
        let p = |name: &str, prior| LabelPrior { name: name.into(), prior, signal };
        let mut s = Self::base(
            "MAMI",
            records,
            text_dim,
            vec![p("misogynous", 0.5), p("shaming", 0.3), p("stereotype", 0.5), p("objectification", 0.45), p("violence", 0.25)],
            vec![
                TaskSpec::new("MAMI", &["misogynous", "shaming", "stereotype", "objectification", "violence"]),
                TaskSpec::new("Task_A", &["misogynous"]),
                TaskSpec::new("Task_B", &["shaming", "stereotype", "objectification", "violence"]),
            ],
        );
        s.parent = Some("misogynous".into());
        s
    }

    /// Single-label hateful-meme-style dataset.
    pub fn fbhm(records: usize, text_dim: usize, signal: f64) -> Self {
        Self::base(
            "FBHM",
            records,
            text_dim,
            vec![LabelPrior { name: "hateful".into(), prior: 0.4, signal }],
            vec![TaskSpec::new("Hateful", &["hateful"])],
        )
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut patch = TrackSpec::new("clip_patches", TrackKind::ImagePatch, self.image_patch_dim);
        patch.max_len = self.image_patches;
        let mut obj = TrackSpec::detector("detr_objects", self.object_dim, self.logit_classes);
        obj.max_len = self.object_boxes;
        let mut text = TrackSpec::new("text_tokens", TrackKind::Text, self.text_dim);
        text.max_len = self.text_len.1.max(1);
        DatasetSpec {
            name: self.name.clone(),
            label_names: self.labels.iter().map(|l| l.name.clone()).collect(),
            tasks: self.tasks.clone(),
            tracks: vec![patch, obj, text],
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |m: String| Err(StoreError::Config(m));
        for l in &self.labels {
            if !(l.signal >= 0.0 && l.signal.is_finite()) {
                return bad(format!("label {}: signal strength {} must be >= 0", l.name, l.signal));
            }
            if !(0.0..=1.0).contains(&l.prior) {
                return bad(format!("label {}: prior {} outside [0, 1]", l.name, l.prior));
            }
        }
        for (what, f) in [
            ("no_object_fraction", self.no_object_fraction),
            ("all_no_object_fraction", self.all_no_object_fraction),
            ("planted_fraction", self.planted_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{what} {f} outside [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        if self.text_len.0 == 0 || self.text_len.0 > self.text_len.1 {
            return bad(format!("text_len {:?} must satisfy 1 <= min <= max", self.text_len));
        }
        if self.image_patches == 0 || self.object_boxes == 0 || self.logit_classes < 2 {
            return bad("image_patches, object_boxes must be >= 1 and logit_classes >= 2".into());
        }
        if let Some(p) = &self.parent {
            if !self.labels.iter().any(|l| &l.name == p) {
                return bad(format!("parent label {p} is not declared"));
            }
        }
        self.dataset_spec().validate()
    }
}

/// Generates `spec.records` records. Each label is encoded by a fixed random
/// unit direction per track, added with sign `2y - 1` to a random subset of
/// the valid tokens on top of Gaussian noise.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<(DatasetSpec, Vec<FeatureRecord>), StoreError> {
    spec.validate()?;
    let ds = spec.dataset_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [spec.image_patch_dim, spec.object_dim, spec.text_dim];
    let directions: Vec<[Vec<f32>; 3]> =
        spec.labels.iter().map(|_| dims.map(|d| unit_vector(&mut rng, d))).collect();
    let parent = spec.parent.as_ref().and_then(|p| ds.label_index(p));
    let no_obj = spec.logit_classes - 1;

    let mut records = Vec::with_capacity(spec.records);
    for id in 0..spec.records as u64 {
        let mut labels: Vec<u8> = spec.labels.iter().map(|l| (rng.random::<f64>() < l.prior) as u8).collect();
        if let Some(p) = parent {
            // Children were drawn conditional on the parent being positive.
            if labels[p] == 0 {
                labels.iter_mut().for_each(|y| *y = 0);
            }
        }

        let patches = noise_tokens(&mut rng, spec.image_patches, spec.image_patch_dim, spec.noise);
        let n_text = rng.random_range(spec.text_len.0..=spec.text_len.1);
        let text = noise_tokens(&mut rng, n_text, spec.text_dim, spec.noise);
        let objects = noise_tokens(&mut rng, spec.object_boxes, spec.object_dim, spec.noise);
        let all_bg = rng.random::<f64>() < spec.all_no_object_fraction;
        let mut logits = Vec::with_capacity(spec.object_boxes * spec.logit_classes);
        for _ in 0..spec.object_boxes {
            let start = logits.len();
            logits.extend((0..spec.logit_classes).map(|_| rng.sample::<f32, _>(StandardNormal)));
            let winner = if all_bg || rng.random::<f64>() < spec.no_object_fraction {
                no_obj
            } else {
                let c = rng.random_range(0..spec.logit_classes - 1);
                if c >= no_obj { c + 1 } else { c }
            };
            logits[start + winner] += 6.0;
        }
        let obj_mask = object_mask(&logits, spec.logit_classes, no_obj, &vec![true; spec.object_boxes])?;

        let mut tracks = [
            TrackData { tokens: patches, mask: vec![true; spec.image_patches], logits: None },
            TrackData { tokens: objects, mask: vec![true; spec.object_boxes], logits: Some(logits) },
            TrackData { tokens: text, mask: vec![true; n_text], logits: None },
        ];
        for (k, track) in tracks.iter_mut().enumerate() {
            let d = dims[k];
            let eligible: Vec<usize> =
                (0..track.seq_len()).filter(|&i| k != TrackKind::Object.index() || obj_mask[i]).collect();
            let mut chosen: Vec<usize> = eligible.iter().copied().filter(|_| rng.random::<f64>() < spec.planted_fraction).collect();
            if chosen.is_empty() && !eligible.is_empty() {
                chosen.push(eligible[rng.random_range(0..eligible.len())]);
            }
            for &i in &chosen {
                let tok = &mut track.tokens[i * d..(i + 1) * d];
                for (c, lp) in spec.labels.iter().enumerate() {
                    let sign = if labels[c] == 1 { 1.0 } else { -1.0 };
                    let amp = (lp.signal * sign) as f32;
                    for (x, u) in tok.iter_mut().zip(&directions[c][k]) {
                        *x += amp * u;
                    }
                }
            }
        }
        records.push(FeatureRecord { id, labels, tracks: tracks.into() });
    }
    Ok((ds, records))
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

fn noise_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize, noise: f64) -> Vec<f32> {
    (0..n * d).map(|_| (noise * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
}
