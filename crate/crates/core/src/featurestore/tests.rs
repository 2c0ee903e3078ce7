use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const C: usize = DETR_LOGIT_CLASSES;
const NO_OBJ: usize = C - 1;

fn random_logits(rng: &mut ChaCha8Rng, rows: usize, background: f64) -> Vec<f32> {
    let mut l: Vec<f32> = (0..rows * C).map(|_| rng.sample(StandardNormal)).collect();
    for row in l.chunks_mut(C) {
        if rng.random::<f64>() < background {
            let m = row.iter().cloned().fold(f32::MIN, f32::max);
            row[NO_OBJ] = m + 0.5 + rng.random::<f32>();
        }
    }
    l
}

/// Exhaustive reference: explicit softmax probabilities, rank counting for the fallback.
fn reference_mask(logits: &[f32], rows: usize) -> Vec<bool> {
    let probs = |row: &[f32], skip: Option<usize>| -> Vec<f64> {
        let e: Vec<f64> = row.iter().enumerate().map(|(c, &x)| if Some(c) == skip { 0.0 } else { (x as f64).exp() }).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    };
    let mut keep = vec![false; rows];
    for i in 0..rows {
        let p = probs(&logits[i * C..(i + 1) * C], None);
        let best = (0..C).fold(0, |b, c| if p[c] > p[b] { c } else { b });
        keep[i] = best != NO_OBJ;
    }
    if keep.iter().any(|&k| k) {
        return keep;
    }
    let score: Vec<f64> =
        (0..rows).map(|i| probs(&logits[i * C..(i + 1) * C], Some(NO_OBJ)).into_iter().fold(0.0, f64::max)).collect();
    (0..rows)
        .map(|i| (0..rows).filter(|&j| score[j] > score[i] || (score[j] == score[i] && j < i)).count() < FALLBACK_KEEP)
        .collect()
}

#[test]
fn mask_keeps_all_real_objects() {
    let mut l = vec![0.0f32; 100 * C];
    for (i, row) in l.chunks_mut(C).enumerate() {
        row[i % NO_OBJ] = 5.0;
    }
    assert_eq!(detr_object_mask(&l, C, NO_OBJ).unwrap(), vec![true; 100]);
}

#[test]
fn mask_keeps_only_the_single_real_object() {
    let mut l = vec![0.0f32; 100 * C];
    for row in l.chunks_mut(C).take(99) {
        row[NO_OBJ] = 5.0;
    }
    l[99 * C + 3] = 5.0;
    let m = detr_object_mask(&l, C, NO_OBJ).unwrap();
    assert_eq!(m.iter().filter(|&&k| k).count(), 1);
    assert!(m[99]);
}

#[test]
fn fallback_keeps_top_four_secondary() {
    let mut l = vec![0.0f32; 100 * C];
    for (i, row) in l.chunks_mut(C).enumerate() {
        row[NO_OBJ] = 10.0;
        row[7] = i as f32 * 0.01;
    }
    let m = detr_object_mask(&l, C, NO_OBJ).unwrap();
    let kept: Vec<usize> = (0..100).filter(|&i| m[i]).collect();
    assert_eq!(kept, vec![96, 97, 98, 99]);
}

#[test]
fn fallback_ties_go_to_lowest_index() {
    let mut l = vec![0.0f32; 10 * C];
    for row in l.chunks_mut(C) {
        row[NO_OBJ] = 3.0;
    }
    let m = detr_object_mask(&l, C, NO_OBJ).unwrap();
    assert_eq!(m, [vec![true; 4], vec![false; 6]].concat());
}

#[test]
fn fallback_with_fewer_boxes_than_keep_keeps_all() {
    let mut l = vec![0.0f32; 2 * C];
    l[NO_OBJ] = 4.0;
    l[C + NO_OBJ] = 4.0;
    assert_eq!(detr_object_mask(&l, C, NO_OBJ).unwrap(), vec![true, true]);
}

#[test]
fn mask_matches_reference_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        // Two thirds of the trials are fully background to exercise the fallback.
        let bg = if trial % 3 == 0 { 0.9 } else { 1.0 };
        let l = random_logits(&mut rng, 100, bg);
        let got = detr_object_mask(&l, C, NO_OBJ).unwrap();
        assert_eq!(got, reference_mask(&l, 100), "trial {trial}");
        if bg == 1.0 {
            assert_eq!(got.iter().filter(|&&k| k).count(), 4);
        }
    }
}

#[test]
fn mask_rejects_non_finite() {
    let mut l = vec![0.0f32; 3 * C];
    l[5] = f32::NAN;
    assert!(matches!(detr_object_mask(&l, C, NO_OBJ), Err(StoreError::NonFiniteLogits)));
}

#[test]
fn object_mask_respects_validity() {
    let mut l = vec![0.0f32; 6 * C];
    for row in l.chunks_mut(C) {
        row[NO_OBJ] = 2.0;
    }
    let valid = [false, true, false, true, true, true];
    let m = object_mask(&l, C, NO_OBJ, &valid).unwrap();
    assert_eq!(m, vec![false, true, false, true, true, true]);
}

proptest! {
    #[test]
    fn mask_is_never_empty(seed in 0u64..10_000, rows in 1usize..40, bg in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_logits(&mut rng, rows, bg);
        let m = detr_object_mask(&l, C, NO_OBJ).unwrap();
        prop_assert!(m.iter().any(|&k| k));
        prop_assert_eq!(m, reference_mask(&l, rows));
    }
}

fn small_synth(records: usize, signal: f64) -> SynthSpec {
    let mut s = SynthSpec::mami(records, 8, signal);
    s.object_boxes = 12;
    s.text_len = (2, 9);
    s.image_patch_dim = 6;
    s.object_dim = 5;
    s
}

#[test]
fn container_round_trip_is_bit_exact() {
    let (spec, records) = synth_generate(&small_synth(100, 1.0), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_features(dir.path(), &spec, &records).unwrap();
    let (spec2, records2) = read_features(dir.path()).unwrap();
    assert_eq!(spec, spec2);
    assert_eq!(records.len(), records2.len());
    for (a, b) in records.iter().zip(&records2) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.labels, b.labels);
        for (ta, tb) in a.tracks.iter().zip(&b.tracks) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ta.tokens), bits(&tb.tokens));
            assert_eq!(ta.mask, tb.mask);
            assert_eq!(ta.logits.as_deref().map(bits), tb.logits.as_deref().map(bits));
        }
    }
}

fn written(records: usize) -> (tempfile::TempDir, Vec<u8>) {
    let (spec, recs) = synth_generate(&small_synth(records, 1.0), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_features(dir.path(), &spec, &recs).unwrap();
    let bytes = std::fs::read(dir.path().join(RECORDS_FILE)).unwrap();
    (dir, bytes)
}

#[test]
fn container_rejects_bad_magic() {
    let (dir, mut bytes) = written(3);
    bytes[0] = b'X';
    std::fs::write(dir.path().join(RECORDS_FILE), bytes).unwrap();
    let err = read_features(dir.path()).unwrap_err();
    assert_eq!(err.code(), "bad_magic");
}

#[test]
fn container_rejects_wrong_version() {
    let (dir, mut bytes) = written(3);
    bytes[4] = 2;
    std::fs::write(dir.path().join(RECORDS_FILE), bytes).unwrap();
    assert_eq!(read_features(dir.path()).unwrap_err().code(), "version");
}

#[test]
fn container_rejects_truncation() {
    let (dir, bytes) = written(3);
    std::fs::write(dir.path().join(RECORDS_FILE), &bytes[..bytes.len() - 7]).unwrap();
    assert_eq!(read_features(dir.path()).unwrap_err().code(), "truncated");
}

#[test]
fn container_rejects_corrupted_payload() {
    let (dir, mut bytes) = written(3);
    // A mantissa bit of the first image-patch token.
    bytes[6 + 8 + 5 + 2] ^= 0x01;
    std::fs::write(dir.path().join(RECORDS_FILE), bytes).unwrap();
    assert_eq!(read_features(dir.path()).unwrap_err().code(), "checksum");
}

#[test]
fn container_rejects_trailing_bytes() {
    let (dir, mut bytes) = written(2);
    bytes.push(0);
    std::fs::write(dir.path().join(RECORDS_FILE), bytes).unwrap();
    assert_eq!(read_features(dir.path()).unwrap_err().code(), "inconsistent");
}

fn text_spec() -> DatasetSpec {
    DatasetSpec {
        name: "t".into(),
        label_names: vec!["y".into()],
        tasks: vec![TaskSpec::new("t", &["y"])],
        tracks: vec![TrackSpec::new("text", TrackKind::Text, 2)],
    }
}

fn text_record(n: usize) -> FeatureRecord {
    FeatureRecord { id: 0, labels: vec![1], tracks: vec![TrackData { tokens: vec![0.5; 2 * n], mask: vec![true; n], logits: None }] }
}

#[test]
fn overlong_text_is_rejected_on_write() {
    let dir = tempfile::tempdir().unwrap();
    let err = write_features(dir.path(), &text_spec(), &[text_record(121)]).unwrap_err();
    assert_eq!(err.code(), "inconsistent");
    write_features(dir.path(), &text_spec(), &[text_record(120)]).unwrap();
}

#[test]
fn overlong_text_is_rejected_on_read() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = text_spec();
    spec.tracks[0].max_len = 121;
    write_features(dir.path(), &spec, &[text_record(121)]).unwrap();
    // Rewrite the manifest with the standard limit.
    let path = dir.path().join(MANIFEST_FILE);
    let m = std::fs::read_to_string(&path).unwrap().replace("\"max_len\": 121", "\"max_len\": 120");
    std::fs::write(&path, m).unwrap();
    assert_eq!(read_features(dir.path()).unwrap_err().code(), "inconsistent");
}

#[test]
fn manifest_without_tasks_defaults_to_one_task() {
    let dir = tempfile::tempdir().unwrap();
    write_features(dir.path(), &text_spec(), &[text_record(3)]).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("tasks");
    std::fs::write(&path, v.to_string()).unwrap();
    let (spec, _) = read_features(dir.path()).unwrap();
    assert_eq!(spec.tasks, vec![TaskSpec::new("t", &["y"])]);
}

#[test]
fn spec_validation_catches_bad_tasks() {
    let mut s = text_spec();
    s.tasks.push(TaskSpec::new("u", &["nope"]));
    assert_eq!(s.validate().unwrap_err().code(), "invalid_spec");
    let mut s = text_spec();
    s.tasks.push(TaskSpec::new("t", &["y"]));
    assert!(s.validate().is_err());
    let mut s = text_spec();
    s.tasks[0].labels.push("y".into());
    assert!(s.validate().is_err());
    let mut s = text_spec();
    s.tracks[0].has_logits = true;
    assert!(s.validate().is_err());
}

#[test]
fn record_needs_a_valid_text_token() {
    let mut r = text_record(2);
    r.tracks[0].mask = vec![false, false];
    assert!(r.validate(&text_spec()).is_err());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let spec = small_synth(40, 2.0);
    let files = |seed| {
        let (ds, recs) = synth_generate(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), &ds, &recs).unwrap();
        (std::fs::read(dir.path().join(RECORDS_FILE)).unwrap(), std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap())
    };
    assert_eq!(files(11), files(11));
    assert_ne!(files(11).0, files(12).0);
}

#[test]
fn synth_rejects_negative_signal() {
    let err = synth_generate(&small_synth(5, -0.1), 0).unwrap_err();
    assert_eq!(err.code(), "config");
}

#[test]
fn synth_children_imply_parent() {
    let (spec, recs) = synth_generate(&small_synth(300, 1.0), 5).unwrap();
    let p = spec.label_index("misogynous").unwrap();
    for r in &recs {
        if r.labels.iter().enumerate().any(|(i, &y)| i != p && y == 1) {
            assert_eq!(r.labels[p], 1);
        }
    }
    let pos = recs.iter().filter(|r| r.labels[p] == 1).count();
    assert!((100..200).contains(&pos), "{pos}");
}

#[test]
fn synth_all_background_records_keep_four_boxes() {
    let mut s = small_synth(30, 1.0);
    s.all_no_object_fraction = 1.0;
    let (_, recs) = synth_generate(&s, 2).unwrap();
    for r in &recs {
        let t = &r.tracks[1];
        let m = detr_object_mask(t.logits.as_ref().unwrap(), C, NO_OBJ).unwrap();
        assert_eq!(m.iter().filter(|&&k| k).count(), 4);
    }
}

/// Mean-pooled valid tokens of every track, concatenated.
fn pooled_features(spec: &DatasetSpec, r: &FeatureRecord) -> Vec<f64> {
    let mut out = Vec::new();
    for (t, ts) in r.tracks.iter().zip(&spec.tracks) {
        let keep = match &t.logits {
            Some(l) => object_mask(l, ts.logit_classes, ts.no_object_index.unwrap(), &t.mask).unwrap(),
            None => t.mask.clone(),
        };
        let n = keep.iter().filter(|&&k| k).count().max(1) as f64;
        let mut acc = vec![0.0; ts.dim];
        for i in (0..t.seq_len()).filter(|&i| keep[i]) {
            for (a, x) in acc.iter_mut().zip(t.token(i, ts.dim)) {
                *a += *x as f64 / n;
            }
        }
        out.extend(acc);
    }
    out.push(1.0);
    out
}

/// Train accuracy of a logistic-regression probe fitted by full-batch gradient descent.
fn probe_accuracy(x: &[Vec<f64>], y: &[u8]) -> f64 {
    let d = x[0].len();
    let mut w = vec![0.0; d];
    for _ in 0..500 {
        let mut g = vec![0.0; d];
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum();
            let err = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            for (gj, xj) in g.iter_mut().zip(xi) {
                *gj += err * xj / x.len() as f64;
            }
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= 0.5 * gj;
        }
    }
    let correct = x.iter().zip(y).filter(|(xi, &yi)| {
        let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum();
        (z > 0.0) == (yi == 1)
    });
    correct.count() as f64 / x.len() as f64
}

#[test]
fn planted_signal_is_linearly_recoverable() {
    let (spec, recs) = synth_generate(&SynthSpec::fbhm(400, 16, 3.0), 9).unwrap();
    let x: Vec<Vec<f64>> = recs.iter().map(|r| pooled_features(&spec, r)).collect();
    let y: Vec<u8> = recs.iter().map(|r| r.labels[0]).collect();
    let acc = probe_accuracy(&x, &y);
    assert!(acc >= 0.9, "probe accuracy {acc}");

    let (spec, recs) = synth_generate(&SynthSpec::mami(400, 16, 3.0), 9).unwrap();
    let x: Vec<Vec<f64>> = recs.iter().map(|r| pooled_features(&spec, r)).collect();
    for c in 0..spec.label_names.len() {
        let y: Vec<u8> = recs.iter().map(|r| r.labels[c]).collect();
        let acc = probe_accuracy(&x, &y);
        assert!(acc >= 0.9, "{}: probe accuracy {acc}", spec.label_names[c]);
    }
}

#[test]
fn zero_signal_leaves_probe_near_chance_on_held_out() {
    let (spec, recs) = synth_generate(&SynthSpec::fbhm(400, 16, 0.0), 9).unwrap();
    let x: Vec<Vec<f64>> = recs.iter().map(|r| pooled_features(&spec, r)).collect();
    let y: Vec<u8> = recs.iter().map(|r| r.labels[0]).collect();
    // Features carry no label information, so in-sample fit stays well below the planted case.
    assert!(probe_accuracy(&x, &y) < 0.8);
}

fn labelled(labels: &[u8]) -> Vec<FeatureRecord> {
    labels.iter().enumerate().map(|(i, &y)| FeatureRecord { id: i as u64 * 3 + 1, labels: vec![y], tracks: vec![] }).collect()
}

#[test]
fn split_single_stratum() {
    let s = stratified_split(&labelled(&[0; 100]), 0.8, 1).unwrap();
    assert_eq!((s.train.len(), s.dev.len()), (80, 20));
}

#[test]
fn split_two_strata() {
    let labels: Vec<u8> = (0..100).map(|i| (i < 60) as u8).collect();
    let recs = labelled(&labels);
    let s = stratified_split(&recs, 0.8, 1).unwrap();
    let pos = |ids: &[u64]| ids.iter().filter(|&&id| recs.iter().any(|r| r.id == id && r.labels[0] == 1)).count();
    assert_eq!((pos(&s.train), s.train.len() - pos(&s.train)), (48, 32));
    assert_eq!((pos(&s.dev), s.dev.len() - pos(&s.dev)), (12, 8));
}

#[test]
fn split_is_deterministic_and_seed_dependent() {
    let recs = labelled(&[0; 50]);
    assert_eq!(stratified_split(&recs, 0.8, 4).unwrap(), stratified_split(&recs, 0.8, 4).unwrap());
    assert_ne!(stratified_split(&recs, 0.8, 4).unwrap(), stratified_split(&recs, 0.8, 5).unwrap());
}

#[test]
fn split_singleton_goes_to_train() {
    let s = stratified_split(&labelled(&[1, 0, 0, 0, 0]), 0.8, 0).unwrap();
    assert!(s.train.contains(&1));
}

#[test]
fn split_rejects_bad_ratio_and_duplicate_ids() {
    assert!(stratified_split(&labelled(&[0, 1]), 1.0, 0).is_err());
    assert!(stratified_split(&labelled(&[0, 1]), 0.0, 0).is_err());
    let mut recs = labelled(&[0, 1]);
    recs[1].id = recs[0].id;
    assert!(stratified_split(&recs, 0.5, 0).is_err());
}

proptest! {
    #[test]
    fn split_is_a_stratified_partition(labels in prop::collection::vec(0u8..4, 1..200), ratio in 0.05f64..0.95, seed: u64) {
        let recs: Vec<FeatureRecord> = labels.iter().enumerate()
            .map(|(i, &y)| FeatureRecord { id: i as u64, labels: vec![y & 1, y >> 1], tracks: vec![] }).collect();
        let s = stratified_split(&recs, ratio, seed).unwrap();
        let mut all: Vec<u64> = s.train.iter().chain(&s.dev).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..recs.len() as u64).collect::<Vec<_>>());
        for y in 0u8..4 {
            let n = labels.iter().filter(|&&l| l == y).count();
            if n == 0 { continue; }
            let t = s.train.iter().filter(|&&id| labels[id as usize] == y).count();
            if n == 1 {
                prop_assert_eq!(t, 1);
            } else {
                prop_assert!((t as f64 - n as f64 * ratio).abs() <= 1.0);
            }
        }
    }
}
