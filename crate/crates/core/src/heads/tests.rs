use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::layers::Init;
use crate::ndgrad::{finite_diff_check_extrapolated, Graph, ParamStore, Tensor, EXTRAPOLATED_STEP};

const H: usize = 8;

fn names(n: &[&str]) -> Vec<String> {
    n.iter().map(|s| s.to_string()).collect()
}

fn mami_labels() -> Vec<String> {
    names(&["misogynous", "shaming", "stereotype", "objectification", "violence", "hateful"])
}

fn build(mode: HeadMode, tasks: &[(&str, &[&str])]) -> (Heads, ParamStore<f64>) {
    let cfg = HeadConfig { mode, mlp_hidden: 6, decoder_layers: 2, decoder_heads: 2, dropout: 0.0, ..HeadConfig::default() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tasks: Vec<(String, Vec<String>)> = tasks.iter().map(|(t, l)| (t.to_string(), names(l))).collect();
    let heads = Heads::new(&mut Init { store: &mut store, rng: &mut rng }, &cfg, H, &mami_labels(), &tasks).unwrap();
    (heads, store)
}

fn matrix(rows: usize, seed: f64) -> Tensor<f64> {
    Tensor::matrix(rows, H, (0..rows * H).map(|i| ((i as f64 + seed) * 0.77).sin()).collect()).unwrap()
}

#[test]
fn zero_mlp_gives_half_probabilities() {
    let (heads, mut store) = build(HeadMode::MultiHead, &[("Task_B", &["shaming", "stereotype", "objectification", "violence"])]);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let x = f.g.constant(matrix(1, 0.0)).unwrap();
    let out = heads.classify_pooled(&mut f, x, &heads.tasks[0]).unwrap();
    let z = g.value(out.logits).to_f64_vec();
    assert_eq!(z, vec![0.0; 4]);
    assert_eq!(probabilities(&z), vec![0.5; 4]);
}

#[test]
fn single_label_task_has_one_logit() {
    let (heads, store) = build(HeadMode::MultiHead, &[("Task_A", &["misogynous"])]);
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let x = f.g.constant(matrix(1, 1.0)).unwrap();
    let out = heads.classify_pooled(&mut f, x, &heads.tasks[0]).unwrap();
    assert_eq!(g.shape(out.logits), &[1]);
    // The shared input is exactly the pooled vector for every class.
    assert_eq!(out.h0, x);
}

#[test]
fn multi_head_is_not_weight_shared() {
    let (heads, store) = build(HeadMode::MultiHead, &[("MAMI", &["misogynous", "shaming", "stereotype"])]);
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let x = f.g.constant(matrix(1, 2.0)).unwrap();
    let out = heads.classify_pooled(&mut f, x, &heads.tasks[0]).unwrap();
    let z = g.value(out.logits).to_f64_vec();
    // Every class sees the same input, yet the logits differ.
    assert!(z[0] != z[1] && z[1] != z[2]);
}

#[test]
fn mode_mismatch_is_a_config_error() {
    let (heads, store) = build(HeadMode::MultiHead, &[("Task_A", &["misogynous"])]);
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let x = f.g.constant(matrix(1, 0.0)).unwrap();
    assert_eq!(heads.classify_shared(&mut f, x, &heads.tasks[0]).unwrap_err().code(), "config");
    assert_eq!(heads.decode_classes(&mut f, x, &[true], &[0]).unwrap_err().code(), "config");
    let (heads, store) = build(HeadMode::SharedSingle, &[("Task_A", &["misogynous"])]);
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let x = f.g.constant(matrix(1, 0.0)).unwrap();
    assert_eq!(heads.classify_pooled(&mut f, x, &heads.tasks[0]).unwrap_err().code(), "config");
}

#[test]
fn unknown_label_is_a_config_error() {
    let cfg = HeadConfig { mlp_hidden: 4, decoder_layers: 1, decoder_heads: 2, ..HeadConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = Heads::new(&mut Init { store: &mut store, rng: &mut rng }, &cfg, H, &mami_labels(), &[("X".into(), names(&["nope"]))]).unwrap_err();
    assert_eq!(err.code(), "config");
}

#[test]
fn decoder_shapes_for_five_labels() {
    let five = ["misogynous", "shaming", "stereotype", "objectification", "violence"];
    let (heads, store) = build(HeadMode::SharedSingle, &[("MAMI", &five)]);
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let src = f.g.constant(matrix(7, 3.0)).unwrap();
    let mask = [true, true, false, true, true, false, true];
    let (outs, attn) = heads.decode_classes(&mut f, src, &mask, &heads.tasks[0].labels).unwrap();
    assert_eq!(g.shape(outs), &[5, H]);
    assert_eq!(attn.len(), 2);
    for a in &attn {
        assert_eq!(crate::layers::head_mean(&g, a.self_attn).unwrap().len(), 25);
        let cross = crate::layers::head_mean(&g, a.cross_attn).unwrap();
        for row in cross.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            assert_eq!((row[2], row[5]), (0.0, 0.0));
        }
    }
}

#[test]
fn single_class_self_attention_is_one() {
    let (heads, store) = build(HeadMode::SharedSingle, &[("Hateful", &["hateful"])]);
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let src = f.g.constant(matrix(4, 1.0)).unwrap();
    let (_, attn) = heads.decode_classes(&mut f, src, &[true; 4], &heads.tasks[0].labels).unwrap();
    for a in attn {
        assert_eq!(crate::layers::head_mean(&g, a.self_attn).unwrap(), vec![1.0]);
    }
}

#[test]
fn equal_queries_give_equal_class_outputs() {
    let (heads, mut store) = build(HeadMode::SharedSingle, &[("MAMI", &["misogynous", "shaming", "stereotype"])]);
    let q = heads.queries.unwrap();
    let row: Vec<f64> = store.value(q).row(0).to_vec();
    for r in 1..mami_labels().len() {
        store.get_mut(q).value.data_mut()[r * H..(r + 1) * H].copy_from_slice(&row);
    }
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let src = f.g.constant(matrix(5, 2.0)).unwrap();
    let (outs, _) = heads.decode_classes(&mut f, src, &[true; 5], &heads.tasks[0].labels).unwrap();
    let v = g.value(outs);
    assert_eq!(v.row(0), v.row(1));
    assert_eq!(v.row(1), v.row(2));
}

#[test]
fn shared_mlp_is_equivariant() {
    let (heads, store) = build(HeadMode::SharedSingle, &[("MAMI", &["misogynous", "shaming", "stereotype"])]);
    let x = matrix(3, 4.0);
    let perm = [2, 0, 1];
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let a = f.g.constant(x.clone()).unwrap();
    let pa = f.g.rows(a, &perm).unwrap();
    let oa = heads.classify_shared(&mut f, a, &heads.tasks[0]).unwrap();
    let op = heads.classify_shared(&mut f, pa, &heads.tasks[0]).unwrap();
    let za = g.value(oa.logits).to_f64_vec();
    let zp = g.value(op.logits).to_f64_vec();
    for (k, &p) in perm.iter().enumerate() {
        assert_eq!(zp[k], za[p]);
    }
    // Identical rows give identical logits.
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, &store);
    let same = f.g.constant(Tensor::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]).unwrap()).unwrap();
    let o = heads.classify_shared(&mut f, same, &heads.tasks[0]).unwrap();
    let z = g.value(o.logits).to_f64_vec();
    assert_eq!(z[0], z[1]);
}

#[test]
fn probability_anchors() {
    assert_eq!(probabilities(&[0.0]), vec![0.5]);
    assert_eq!(probabilities(&[40.0]), vec![1.0 - PROB_CLAMP]);
    assert_eq!(probabilities(&[-40.0]), vec![PROB_CLAMP]);
    assert!((probabilities(&[3f64.ln()])[0] - 0.75).abs() < 1e-15);
}

#[test]
fn pooled_head_gradient_check() {
    let (heads, mut store) = build(HeadMode::MultiHead, &[("MAMI", &["misogynous", "shaming", "stereotype"])]);
    let x = matrix(1, 5.0);
    let report = finite_diff_check_extrapolated(&mut store, EXTRAPOLATED_STEP, |g, s| -> crate::Result<crate::ndgrad::Var> {
        let mut f = Fwd::eval(g, s);
        let xv = f.g.constant(x.clone())?;
        let out = heads.classify_pooled(&mut f, xv, &heads.tasks[0])?;
        let y = f.g.mul_const(out.logits, &Tensor::vector(vec![0.3, -1.1, 0.7]))?;
        Ok(f.g.sum(y)?)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn decoder_head_gradient_check() {
    let (heads, mut store) = build(HeadMode::SharedSingle, &[("MAMI", &["misogynous", "shaming", "stereotype"]), ("Hateful", &["hateful"])]);
    let src = matrix(4, 6.0);
    let report = finite_diff_check_extrapolated(&mut store, EXTRAPOLATED_STEP, |g, s| -> crate::Result<crate::ndgrad::Var> {
        let mut f = Fwd::eval(g, s);
        let sv = f.g.constant(src.clone())?;
        let pooled = Pooled::Sequence { x: sv, mask: vec![true, false, true, true], spans: vec![] };
        let a = heads.forward(&mut f, &pooled, 0)?;
        let b = heads.forward(&mut f, &pooled, 1)?;
        let ya = f.g.mul_const(a.logits, &Tensor::vector(vec![0.3, -1.1, 0.7]))?;
        let ya = f.g.sum(ya)?;
        let yb = f.g.sum(b.logits)?;
        Ok(f.g.add(ya, yb)?)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}
