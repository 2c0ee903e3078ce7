use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::featurestore::{synth_generate, FeatureRecord};
use crate::fusion::{EncoderVariant, Instance, Pooling};
use crate::layers::Fwd;
use crate::model::Model;
use crate::ndgrad::{Graph, ParamStore, Tensor};
use crate::objectives::AuxFlags;
use crate::testutil::{tiny_model, tiny_synth};

// ---- schedule ----

#[test]
fn one_dataset_two_batches() {
    let ids: Vec<u64> = (0..32).collect();
    let s = build_schedule(&[&ids], 16, 1, 0).unwrap();
    assert_eq!(s.batches.len(), 2);
    assert!(s.batches.iter().all(|b| b.dataset == 0 && b.ids.len() == 16));
}

#[test]
fn proportional_batch_counts() {
    let a: Vec<u64> = (0..160).collect();
    let b: Vec<u64> = (1000..1080).collect();
    let s = build_schedule(&[&a, &b], 16, 7, 3).unwrap();
    assert_eq!(s.counts(2), vec![10, 5]);
    assert_eq!(s, build_schedule(&[&a, &b], 16, 7, 3).unwrap());
    assert_ne!(s, build_schedule(&[&a, &b], 16, 7, 4).unwrap());
    // The two datasets are interleaved, not concatenated.
    let first: Vec<usize> = s.batches.iter().map(|b| b.dataset).collect();
    assert_ne!(first, [vec![0; 10], vec![1; 5]].concat());
}

#[test]
fn last_partial_batch_is_kept() {
    let ids: Vec<u64> = (0..37).collect();
    let s = build_schedule(&[&ids], 16, 0, 0).unwrap();
    let sizes: Vec<usize> = s.batches.iter().map(|b| b.ids.len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 37);
    assert_eq!(sizes.len(), 3);
}

#[test]
fn schedule_errors() {
    let empty: Vec<u64> = vec![];
    assert_eq!(build_schedule(&[&empty], 16, 0, 0).unwrap_err().code(), "data");
    assert_eq!(build_schedule(&[], 16, 0, 0).unwrap_err().code(), "config");
    assert_eq!(build_schedule(&[&[1u64][..]], 0, 0, 0).unwrap_err().code(), "config");
}

proptest! {
    #[test]
    fn schedule_covers_every_record_once(
        sizes in prop::collection::vec(1usize..60, 1..4),
        batch in 1usize..20,
        seed in any::<u64>(),
        epoch in 0usize..5,
    ) {
        let lists: Vec<Vec<u64>> = sizes.iter().enumerate().map(|(d, &n)| (0..n as u64).map(|i| i + 1000 * d as u64).collect()).collect();
        let refs: Vec<&[u64]> = lists.iter().map(Vec::as_slice).collect();
        let s = build_schedule(&refs, batch, seed, epoch).unwrap();
        for (d, list) in lists.iter().enumerate() {
            let mut seen: Vec<u64> = s.batches.iter().filter(|b| b.dataset == d).flat_map(|b| b.ids.clone()).collect();
            seen.sort();
            prop_assert_eq!(&seen, list);
            prop_assert_eq!(s.counts(lists.len())[d], list.len().div_ceil(batch));
        }
        for b in &s.batches {
            prop_assert!(b.ids.iter().all(|id| (id / 1000) as usize == b.dataset));
            prop_assert!(!b.ids.is_empty() && b.ids.len() <= batch);
        }
    }
}

// ---- learning rate and step count ----

#[test]
fn lr_anchors() {
    assert_eq!(lr_at(0, 10, 110, 2e-4), 0.0);
    assert_eq!(lr_at(5, 10, 110, 2e-4), 1e-4);
    assert_eq!(lr_at(10, 10, 110, 2e-4), 2e-4);
    assert_eq!(lr_at(60, 10, 110, 2e-4), 1e-4);
    assert_eq!(lr_at(110, 10, 110, 2e-4), 0.0);
    assert_eq!(lr_at(0, 0, 10, 1.0), 1.0);
}

#[test]
fn step_count_rule() {
    // 800 records in batches of 16 give 50 batches: 2 full windows and a flush.
    let total = optimizer_steps(800usize.div_ceil(16), 20, 15);
    assert_eq!(total, 45);
    assert_eq!(warmup_steps(total), 4);
    assert_eq!(optimizer_steps(40, 20, 3), 6);
    assert_eq!(optimizer_steps(7, 20, 2), 2);
}

// ---- clipping, weight decay ----

fn store_with_grads(grads: &[Vec<f64>]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (i, g) in grads.iter().enumerate() {
        let id = s.add(format!("p{i}.weight"), Tensor::vector(vec![1.0; g.len()]), true);
        s.get_mut(id).grad = Tensor::vector(g.clone());
    }
    s
}

#[test]
fn clipping_examples() {
    let mut s = store_with_grads(&[vec![0.6, 0.0], vec![0.0, 0.8]]);
    assert_eq!(clip_grad_norm(&mut s, 0.5).unwrap(), 1.0);
    assert_eq!(s.grad(s.find("p0.weight").unwrap()).data(), &[0.3, 0.0]);
    assert_eq!(s.grad(s.find("p1.weight").unwrap()).data(), &[0.0, 0.4]);
    let mut s = store_with_grads(&[vec![0.3]]);
    clip_grad_norm(&mut s, 0.5).unwrap();
    assert_eq!(s.grad(s.find("p0.weight").unwrap()).data(), &[0.3]);
    let mut s = store_with_grads(&[vec![f64::NAN]]);
    assert_eq!(clip_grad_norm(&mut s, 0.5).unwrap_err().code(), "numeric");
}

proptest! {
    #[test]
    fn clipping_bounds_the_norm(g in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1..6), 1..4), clip in 0.01f64..3.0) {
        let mut s = store_with_grads(&g);
        let before = s.grad_norm();
        clip_grad_norm(&mut s, clip).unwrap();
        let after = s.grad_norm();
        prop_assert!(after <= before + 1e-12);
        prop_assert!(after <= clip + 1e-6);
    }
}

#[test]
fn weight_decay_skips_biases_and_layer_norms() {
    let (spec, _) = synth_generate(&tiny_synth(2), 0).unwrap();
    for pooling in [Pooling::Cls, Pooling::None] {
        let (_, mut store) = Model::new::<f64>(&tiny_model(EncoderVariant::Shared, pooling, AuxFlags::default()), &[spec.clone()], 0).unwrap();
        let mut audited = 0;
        for p in store.iter() {
            let exempt = p.name.ends_with(".bias") || p.name.ends_with(".ln_weight") || p.name.ends_with(".ln_bias");
            assert_eq!(p.decay, !exempt, "{}", p.name);
            audited += usize::from(exempt);
        }
        assert!(audited > 10);
        apply_weight_decay(&mut store, 0.5);
        for p in store.iter() {
            for (g, v) in p.grad.data().iter().zip(p.value.data()) {
                assert_eq!(*g, if p.decay { 0.5 * v } else { 0.0 }, "{}", p.name);
            }
        }
    }
}

// ---- optimizer ----

fn scalar_store(x: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("x", Tensor::vector(vec![x]), true);
    s
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut s = scalar_store(1.25);
    let mut opt = Madgrad::new(0.9, 1e-6);
    for _ in 0..100 {
        opt.step(&mut s, 0.1).unwrap();
    }
    assert_eq!(s.iter().next().unwrap().value.data(), &[1.25]);
    assert_eq!(opt.k, 100);
    assert_eq!(opt.step(&mut s, -1.0).unwrap_err().code(), "config");
}

#[test]
fn madgrad_minimizes_a_quadratic() {
    let mut s = scalar_store(0.0);
    let mut opt = Madgrad::new(0.9, 1e-6);
    let id = s.find("x").unwrap();
    let mut reached = None;
    for step in 0..2000 {
        let x = s.value(id).data()[0];
        s.get_mut(id).grad = Tensor::vector(vec![2.0 * (x - 3.0)]);
        opt.step(&mut s, 0.1).unwrap();
        if reached.is_none() && (s.value(id).data()[0] - 3.0).abs() <= 1e-2 {
            reached = Some(step);
        }
    }
    assert!(reached.is_some());
    assert!((s.value(id).data()[0] - 3.0).abs() <= 1e-2);
}

/// Runs MADGRAD on `|Ax - b|^2` and returns the smallest gradient norm seen.
pub(crate) fn least_squares_min_grad_norm(seed: u64, lr: f64, steps: usize) -> f64 {
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let noise: f64 = rng.sample(StandardNormal);
            a[i * n + j] = if i == j { 1.0 } else { 0.0 } + 0.1 * noise;
        }
    }
    let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut s = ParamStore::new();
    let id = s.add("x", Tensor::vector(vec![0.0; n]), true);
    let mut opt = Madgrad::new(0.9, 1e-6);
    let mut best = f64::INFINITY;
    for _ in 0..steps {
        let x = s.value(id).data().to_vec();
        let r: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>() - b[i]).collect();
        let g: Vec<f64> = (0..n).map(|j| 2.0 * (0..n).map(|i| a[i * n + j] * r[i]).sum::<f64>()).collect();
        best = best.min(g.iter().map(|v| v * v).sum::<f64>().sqrt());
        s.get_mut(id).grad = Tensor::vector(g);
        opt.step(&mut s, lr).unwrap();
    }
    best
}

#[test]
fn madgrad_solves_least_squares() {
    for seed in 0..3 {
        let norm = least_squares_min_grad_norm(seed, 0.05, 2000);
        assert!(norm <= 1e-3, "seed {seed}: {norm}");
    }
}

// ---- metrics ----

#[test]
fn score_a_examples() {
    assert_eq!(score_a(&[0.9, 0.1, 0.7], &[1, 0, 1], 0.5).unwrap(), 1.0);
    let s = score_a(&[0.9, 0.2, 0.1, 0.3], &[1, 1, 0, 0], 0.5).unwrap();
    assert!((s - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    assert!((s - 0.733_333_333).abs() <= 1e-6);
    assert_eq!(score_a(&[0.9, 0.8], &[0, 0], 0.5).unwrap(), 0.0);
    assert_eq!(score_a(&[], &[], 0.5).unwrap_err().code(), "data");
}

#[test]
fn score_b_examples() {
    let perfect = score_b(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[vec![1, 0], vec![0, 1]], 0.5).unwrap();
    assert_eq!(perfect, 1.0);
    // Label 0: support 3, tp 2, fn 1 -> F1 0.8. Label 1: support 1, tp 1, fp 3 -> F1 0.4.
    let labels = vec![vec![1, 1], vec![1, 0], vec![1, 0], vec![0, 0], vec![0, 0], vec![0, 0]];
    let probs = vec![vec![0.9, 0.9], vec![0.9, 0.9], vec![0.1, 0.9], vec![0.1, 0.9], vec![0.1, 0.1], vec![0.1, 0.1]];
    assert!((score_b(&probs, &labels, 0.5).unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(score_b(&[vec![0.9]], &[vec![0]], 0.5).unwrap_err().code(), "data");
}

/// Precision/recall route through an explicit 2x2 confusion matrix.
fn confusion_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let mut m = [[0usize; 2]; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        m[usize::from(t)][usize::from(p)] += 1;
    }
    let tp = m[1][1] as f64;
    let precision = if m[0][1] + m[1][1] == 0 { 0.0 } else { tp / (m[0][1] + m[1][1]) as f64 };
    let recall = if m[1][0] + m[1][1] == 0 { 0.0 } else { tp / (m[1][0] + m[1][1]) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[test]
fn metrics_match_confusion_matrix_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let c = rng.random_range(1..6);
        let probs: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random::<f64>()).collect()).collect();
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..c).map(|_| u8::from(rng.random_bool(0.4))).collect()).collect();
        let pred = |k: usize| -> Vec<bool> { probs.iter().map(|r| r[k] >= 0.5).collect() };
        let truth = |k: usize| -> Vec<bool> { labels.iter().map(|r| r[k] == 1).collect() };
        let not = |v: Vec<bool>| -> Vec<bool> { v.into_iter().map(|b| !b).collect() };
        let want_a = (confusion_f1(&pred(0), &truth(0)) + confusion_f1(&not(pred(0)), &not(truth(0)))) / 2.0;
        let p0: Vec<f64> = probs.iter().map(|r| r[0]).collect();
        let y0: Vec<u8> = labels.iter().map(|r| r[0]).collect();
        assert!((score_a(&p0, &y0, 0.5).unwrap() - want_a).abs() <= 1e-9);
        let support: Vec<usize> = (0..c).map(|k| truth(k).iter().filter(|&&t| t).count()).collect();
        let total: usize = support.iter().sum();
        match score_b(&probs, &labels, 0.5) {
            Ok(got) => {
                let want: f64 = (0..c).map(|k| support[k] as f64 * confusion_f1(&pred(k), &truth(k))).sum::<f64>() / total as f64;
                assert!((got - want).abs() <= 1e-9);
            }
            Err(_) => assert_eq!(total, 0),
        }
    }
}

// ---- accumulation ----

fn tiny_job(records: usize, aux: AuxFlags) -> (TrainJob, Vec<FeatureRecord>) {
    let (spec, recs) = synth_generate(&tiny_synth(records), 3).unwrap();
    let mut model = tiny_model(EncoderVariant::Multi, Pooling::None, aux);
    model.fusion.dropout = 0.1;
    model.head.dropout = 0.1;
    let train = TrainConfig { batch_size: 4, epochs: 3, accumulation_every: 2, lr: 1e-2, seed: 5, ..TrainConfig::default() };
    (TrainJob { model, train, datasets: vec![spec] }, recs)
}

#[test]
fn gradients_accumulate_across_batches() {
    let (job, recs) = tiny_job(6, AuxFlags { align: true, contrastive: true });
    let spec = &job.datasets[0];
    let (model, store0) = Model::new::<f64>(&job.model, &job.datasets, 1).unwrap();
    let insts: Vec<Instance<f64>> = recs.iter().map(|r| Instance::from_record(spec, r).unwrap()).collect();
    let (b1, b2): (Vec<&Instance<f64>>, Vec<&Instance<f64>>) = (insts[..3].iter().collect(), insts[3..].iter().collect());
    let backward = |store: &mut ParamStore<f64>, batch: &[&Instance<f64>]| {
        let mut g = Graph::new();
        let snapshot = store.clone();
        let bl = model.batch_loss(&mut Fwd::eval(&mut g, &snapshot), 0, batch).unwrap();
        assert_eq!(bl.tasks.len(), 3);
        g.backward(bl.loss, store).unwrap();
    };
    let mut both = store0.clone();
    backward(&mut both, &b1);
    backward(&mut both, &b2);
    let mut one = store0.clone();
    backward(&mut one, &b1);
    let mut two = store0;
    backward(&mut two, &b2);
    for ((a, b), c) in both.iter().zip(one.iter()).zip(two.iter()) {
        for ((x, y), z) in a.grad.data().iter().zip(b.grad.data()).zip(c.grad.data()) {
            assert!((x - (y + z)).abs() <= 1e-12 * (1.0 + x.abs()), "{}", a.name);
        }
    }
}

#[test]
fn single_label_dataset_has_one_task_loss() {
    let mut synth = crate::featurestore::SynthSpec::fbhm(4, crate::testutil::H, 1.0);
    synth.image_patch_dim = 6;
    synth.object_dim = 5;
    synth.object_boxes = 6;
    synth.text_len = (2, 4);
    let (spec, recs) = synth_generate(&synth, 0).unwrap();
    let (model, store) = Model::new::<f64>(&tiny_model(EncoderVariant::Multi, Pooling::None, AuxFlags::default()), std::slice::from_ref(&spec), 0).unwrap();
    let insts: Vec<Instance<f64>> = recs.iter().map(|r| Instance::from_record(&spec, r).unwrap()).collect();
    let batch: Vec<&Instance<f64>> = insts.iter().collect();
    let mut g = Graph::new();
    let bl = model.batch_loss(&mut Fwd::eval(&mut g, &store), 0, &batch).unwrap();
    assert_eq!(bl.tasks.len(), 1);
    assert_eq!(bl.tasks[0].0, "Hateful");
    assert_eq!(bl.value, bl.tasks[0].1.task_total);
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let (job, _) = tiny_job(2, AuxFlags::default());
    let (_, mut store) = job.build_model().unwrap();
    let mut opt = Madgrad::new(0.9, 1e-6);
    for p in store.iter_mut() {
        p.grad.data_mut().iter_mut().enumerate().for_each(|(i, g)| *g = (i as f32 * 0.37).sin());
    }
    opt.step(&mut store, 0.01).unwrap();
    let path = dir.path().join("a.ckpt");
    let job_json = serde_json::to_value(&job).unwrap();
    save_checkpoint(&path, &store, Some(&opt), 4, &job_json, &serde_json::json!({"x": 1})).unwrap();
    let ck = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ck.header.epoch, 4);
    assert_eq!(ck.header.job, job_json);
    assert_eq!(ck.optimizer.as_ref(), Some(&opt));
    let (_, mut fresh) = job.build_model().unwrap();
    for p in fresh.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    ck.restore(&mut fresh).unwrap();
    for (a, b) in store.iter().zip(fresh.iter()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    assert_eq!(load_checkpoint::<f64>(&path).unwrap_err().code(), "checkpoint");
}

#[test]
fn checkpoint_rejects_other_shapes_and_versions() {
    let dir = tempfile::tempdir().unwrap();
    let (mut job, _) = tiny_job(2, AuxFlags::default());
    let (_, store) = job.build_model().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &store, None, 1, &serde_json::Value::Null, &serde_json::Value::Null).unwrap();
    job.model.fusion.hidden_dim = 8;
    job.model.head.mlp_hidden = 8;
    for ds in &mut job.datasets {
        for t in &mut ds.tracks {
            if t.kind == crate::featurestore::TrackKind::Text {
                t.dim = 8;
            }
        }
    }
    let (_, mut other) = job.build_model().unwrap();
    let err = load_checkpoint::<f32>(&path).unwrap().restore(&mut other).unwrap_err();
    assert_eq!(err.code(), "checkpoint");
    assert!(err.to_string().contains("shape mismatch"), "{err}");

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 9;
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).unwrap_err().to_string().contains("version"));
    bytes[4] = 1;
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint::<f32>(&path).unwrap_err().to_string().contains("truncated"));
    std::fs::write(&path, b"nope").unwrap();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap_err().code(), "checkpoint");
}

// ---- runs ----

fn splits(job: &TrainJob, recs: &[FeatureRecord]) -> Vec<DataSplits> {
    let cut = recs.len() * 3 / 4;
    vec![DataSplits { spec: job.datasets[0].clone(), train: recs[..cut].to_vec(), dev: recs[cut..].to_vec(), test: None }]
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let (job, recs) = tiny_job(12, AuxFlags { align: true, contrastive: true });
    let data = splits(&job, &recs);
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    let sa = run(&job, &data, &a, &RunOptions::default()).unwrap();
    let sb = run(&job, &data, &b, &RunOptions::default()).unwrap();
    let read = |p: std::path::PathBuf| String::from_utf8(std::fs::read(p).unwrap()).unwrap();
    let trace_a = read(a.join(TRACE_FILE));
    assert_eq!(trace_a, read(b.join(TRACE_FILE)));
    assert_eq!(sa, sb);
    assert!(sa.complete && !a.join(INCOMPLETE_MARKER).exists() && !a.join(LOCK_FILE).exists());
    // 9 training records in batches of 4 give 3 batches: one window of 2 and a flush, per epoch.
    assert_eq!(sa.steps, 6);
    assert_eq!(trace_a.lines().count(), 6);
    assert_eq!(sa.series.len(), 6);
    assert!(sa.series.iter().all(|s| s.scores.len() == 3));
    assert!(a.join("best.ckpt").exists() && a.join(LAST_CHECKPOINT).exists());

    let partial = run(&job, &data, &c, &RunOptions { stop_after: Some(1), resume: false }).unwrap();
    assert!(!partial.complete && c.join(INCOMPLETE_MARKER).exists());
    assert_eq!(partial.epochs_completed, 1);
    // Simulate a crash after extra trace output.
    std::fs::OpenOptions::new().append(true).open(c.join(TRACE_FILE)).unwrap().write_all(b"garbage\n").unwrap();
    let resumed = run(&job, &data, &c, &RunOptions { stop_after: None, resume: true }).unwrap();
    assert_eq!(read(c.join(TRACE_FILE)), trace_a);
    assert_eq!(read(c.join("metrics.jsonl")), read(a.join("metrics.jsonl")));
    assert_eq!(resumed, sa);
}

use std::io::Write;

#[test]
fn locked_run_directory_is_refused() {
    let (job, recs) = tiny_job(8, AuxFlags::default());
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(LOCK_FILE), "1").unwrap();
    let err = run(&job, &splits(&job, &recs), dir.path(), &RunOptions::default()).unwrap_err();
    assert_eq!(err.code(), "locked");
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { weight_decay: -1.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert_eq!(c.validate().unwrap_err().code(), "config");
    }
    let defaults = TrainConfig::default();
    assert_eq!((defaults.batch_size, defaults.epochs, defaults.accumulation_every), (16, 15, 20));
    assert_eq!((defaults.lr, defaults.weight_decay, defaults.clip_norm), (2e-4, 5e-4, 0.5));
}
