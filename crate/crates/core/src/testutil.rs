//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::featurestore::{DatasetSpec, FeatureRecord, SynthSpec, TaskSpec, TrackData, TrackKind, TrackSpec, DETR_LOGIT_CLASSES};
use crate::fusion::{EncoderVariant, FusionConfig, Instance, Pooling};
use crate::heads::HeadConfig;
use crate::model::ModelConfig;
use crate::ndgrad::{Activation, Real};
use crate::objectives::AuxFlags;

pub const H: usize = 16;

pub fn tiny_fusion(variant: EncoderVariant, pooling: Pooling) -> FusionConfig {
    FusionConfig {
        hidden_dim: H,
        variant,
        pooling,
        shared_layers: 1,
        shared_heads: 2,
        track_layers: 1,
        track_heads: 2,
        text_layers: 1,
        text_heads: 2,
        ffn_mult: 4,
        dropout: 0.0,
        activation: Activation::Gelu,
        backbones: vec![TrackKind::ImagePatch, TrackKind::Object],
    }
}

pub fn tiny_model(variant: EncoderVariant, pooling: Pooling, aux: AuxFlags) -> ModelConfig {
    ModelConfig {
        fusion: tiny_fusion(variant, pooling),
        head: HeadConfig { mlp_hidden: 12, decoder_layers: 1, decoder_heads: 2, dropout: 0.0, ..HeadConfig::default() },
        aux,
    }
}

pub fn tiny_synth(records: usize) -> SynthSpec {
    let mut s = SynthSpec::mami(records, H, 2.0);
    s.image_patch_dim = 6;
    s.object_dim = 5;
    s.object_boxes = 6;
    s.text_len = (2, 5);
    s.no_object_fraction = 0.5;
    s
}

/// Dataset with the reference track lengths and small widths.
pub fn full_spec(text_dim: usize) -> DatasetSpec {
    DatasetSpec {
        name: "full".into(),
        label_names: vec!["a".into(), "b".into()],
        tasks: vec![TaskSpec::new("ab", &["a", "b"]), TaskSpec::new("a_only", &["a"])],
        tracks: vec![
            TrackSpec::new("patches", TrackKind::ImagePatch, 3),
            TrackSpec::detector("objects", 4, DETR_LOGIT_CLASSES),
            TrackSpec::new("text", TrackKind::Text, text_dim),
        ],
    }
}

/// Record for [`full_spec`] with `n_text` text tokens; `background` makes
/// every box no-object, otherwise every box is a real object.
pub fn full_record(spec: &DatasetSpec, id: u64, n_text: usize, background: bool, seed: u64) -> FeatureRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let lens = [spec.tracks[0].max_len, spec.tracks[1].max_len, n_text];
    let mut tracks = Vec::new();
    for (ts, &n) in spec.tracks.iter().zip(&lens) {
        let logits = ts.has_logits.then(|| {
            let mut l = normal(n * ts.logit_classes);
            for (i, row) in l.chunks_mut(ts.logit_classes).enumerate() {
                let winner = if background { ts.logit_classes - 1 } else { i % (ts.logit_classes - 1) };
                row[winner] += 10.0;
            }
            l
        });
        tracks.push(TrackData { tokens: normal(n * ts.dim), mask: vec![true; n], logits });
    }
    let labels = vec![(id % 2) as u8, ((id / 2) % 2) as u8];
    FeatureRecord { id, labels, tracks }
}

pub fn instance<T: Real>(spec: &DatasetSpec, r: &FeatureRecord) -> Instance<T> {
    Instance::from_record(spec, r).unwrap()
}
