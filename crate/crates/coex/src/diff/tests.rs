use super::gradcheck::{finite_diff_check, relative_error};
use super::*;
use crate::seeding::derived_rng;
use rand::Rng;

fn store_with(entries: &[(&str, Mat)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, value) in entries {
        s.register(name, value.clone()).unwrap();
    }
    s
}

fn random_mat(rows: usize, cols: usize, seed: u64, scale: f64) -> Mat {
    let mut rng = derived_rng(seed, "mat", &[]);
    let mut m = Mat::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = rng.gen_range(-scale..scale);
    }
    m
}

#[test]
fn zero_net_maps_anything_to_zero() {
    let spec = NetSpec::mlp(&[4, 3, 2]);
    let mut store = ParamStore::new();
    for (suffix, r, c) in [("l0/w", 4, 3), ("l0/b", 1, 3), ("l1/w", 3, 2), ("l1/b", 1, 2)] {
        store.register(&format!("net/{suffix}"), Mat::zeros((r, c))).unwrap();
    }
    let mut tape = Tape::new();
    let x = tape.constant(random_mat(5, 4, 1, 2.0));
    let y = net_forward(&mut tape, Binding::Trainable(&store), "net", &spec, x).unwrap();
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn identity_linear_layer_is_identity() {
    let spec = NetSpec::mlp(&[3, 3]);
    let store = store_with(&[("net/l0/w", Mat::eye(3)), ("net/l0/b", Mat::zeros((1, 3)))]);
    let mut tape = Tape::new();
    let input = random_mat(4, 3, 2, 1.0);
    let x = tape.constant(input.clone());
    let y = net_forward(&mut tape, Binding::Trainable(&store), "net", &spec, x).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn residual_block_with_zero_inner_weights_passes_shortcut() {
    let spec = NetSpec::residual(3, 3, 3);
    let mut store = store_with(&[
        ("net/l0/w", Mat::eye(3)),
        ("net/l0/b", Mat::zeros((1, 3))),
        ("net/rb0/w", Mat::zeros((3, 3))),
        ("net/rb0/b", Mat::zeros((1, 3))),
        ("net/rb1/w", Mat::zeros((3, 3))),
        ("net/rb1/b", Mat::zeros((1, 3))),
        ("net/head/w", Mat::eye(3)),
        ("net/head/b", Mat::zeros((1, 3))),
    ]);
    store.set_value("net/l0/w", Mat::eye(3)).unwrap();
    let mut tape = Tape::new();
    // Nonnegative input so the block's ReLUs are transparent.
    let input = random_mat(2, 3, 3, 1.0).mapv(f64::abs);
    let x = tape.constant(input.clone());
    let y = net_forward(&mut tape, Binding::Trainable(&store), "net", &spec, x).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn shape_mismatch_is_rejected() {
    let spec = NetSpec::mlp(&[4, 2]);
    let store = store_with(&[("net/l0/w", Mat::zeros((4, 2))), ("net/l0/b", Mat::zeros((1, 2)))]);
    let mut tape = Tape::new();
    let x = tape.constant(Mat::zeros((1, 3)));
    assert!(net_forward(&mut tape, Binding::Trainable(&store), "net", &spec, x).is_err());
}

#[test]
fn linear_gradient_is_the_input() {
    // f(w) = w * x with x = 2 -> df/dw = 2.
    let store = store_with(&[("w", scalar(1.5))]);
    let mut tape = Tape::new();
    let w = tape.param(Binding::Trainable(&store), "w").unwrap();
    let x = tape.scalar_const(2.0);
    let y = tape.mul(w, x);
    let mut grads = Grads::zeros(&store);
    tape.backward(y, &mut grads).unwrap();
    assert_eq!(grads.by_name(&store, "w").unwrap()[(0, 0)], 2.0);
}

#[test]
fn backward_without_scalar_loss_is_an_error() {
    let store = store_with(&[("w", Mat::zeros((2, 2)))]);
    let mut tape = Tape::new();
    let w = tape.param(Binding::Trainable(&store), "w").unwrap();
    let mut grads = Grads::zeros(&store);
    assert!(tape.backward(w, &mut grads).is_err());
    let empty = Tape::new();
    assert!(empty.backward(Var(0), &mut grads).is_err());
}

#[test]
fn repeated_backward_accumulates_additively() {
    let store = store_with(&[("w", scalar(0.7))]);
    let mut tape = Tape::new();
    let w = tape.param(Binding::Trainable(&store), "w").unwrap();
    let y = tape.square(w);
    let mut grads = Grads::zeros(&store);
    tape.backward(y, &mut grads).unwrap();
    let once = grads.by_name(&store, "w").unwrap()[(0, 0)];
    tape.backward(y, &mut grads).unwrap();
    let twice = grads.by_name(&store, "w").unwrap()[(0, 0)];
    assert_eq!(twice, 2.0 * once);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let spec = NetSpec::mlp(&[5, 6, 4, 1]);
    let mut store = ParamStore::new();
    init_net_for_test(&mut store, "net", &spec, 7);
    let input = random_mat(3, 5, 8, 1.0);

    let loss = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = net_forward(&mut tape, Binding::Trainable(s), "net", &spec, x)?;
        let sq = tape.square(y);
        let l = tape.mean_all(sq);
        Ok(tape.value(l)[(0, 0)])
    };
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = net_forward(&mut tape, Binding::Trainable(&store), "net", &spec, x).unwrap();
    let sq = tape.square(y);
    let l = tape.mean_all(sq);
    let mut grads = Grads::zeros(&store);
    tape.backward(l, &mut grads).unwrap();

    let report = finite_diff_check(&mut store, &["net/"], &grads, 1e-4, loss).unwrap();
    assert!(report.max_err < 1e-4, "worst: {}", report.worst_param);
}

#[test]
fn residual_and_tanh_paths_match_finite_differences() {
    let spec = NetSpec::residual(4, 5, 2);
    let mut store = ParamStore::new();
    init_net_for_test(&mut store, "net", &spec, 9);
    let input = random_mat(3, 4, 10, 1.0);

    let loss = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = net_forward(&mut tape, Binding::Trainable(s), "net", &spec, x)?;
        let t = tape.tanh(y);
        let sq = tape.square(t);
        let l = tape.mean_all(sq);
        Ok(tape.value(l)[(0, 0)])
    };
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = net_forward(&mut tape, Binding::Trainable(&store), "net", &spec, x).unwrap();
    let t = tape.tanh(y);
    let sq = tape.square(t);
    let l = tape.mean_all(sq);
    let mut grads = Grads::zeros(&store);
    tape.backward(l, &mut grads).unwrap();

    let report = finite_diff_check(&mut store, &["net/"], &grads, 1e-4, loss).unwrap();
    assert!(report.max_err < 1e-4, "worst: {}", report.worst_param);
}

#[test]
fn softmax_rows_is_normalized_and_matches_finite_differences() {
    let mut store = store_with(&[("logits", random_mat(3, 4, 11, 2.0))]);
    let mut tape = Tape::new();
    let x = tape.param(Binding::Trainable(&store), "logits").unwrap();
    let y = tape.softmax_rows(x);
    let yv = tape.value(y).clone();
    for r in yv.rows() {
        assert!((r.sum() - 1.0).abs() < 1e-12);
        assert!(r.iter().all(|&v| v > 0.0));
    }
    // Scalar probe of the Jacobian: weighted sum of outputs.
    let w = tape.constant(random_mat(3, 4, 12, 1.0));
    let probe = tape.mul(y, w);
    let l = tape.sum_all(probe);
    let mut grads = Grads::zeros(&store);
    tape.backward(l, &mut grads).unwrap();

    let wv = tape.value(w).clone();
    let loss = move |s: &ParamStore| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let x = t.param(Binding::Trainable(s), "logits")?;
        let y = t.softmax_rows(x);
        let w = t.constant(wv.clone());
        let p = t.mul(y, w);
        let l = t.sum_all(p);
        Ok(t.value(l)[(0, 0)])
    };
    let report = finite_diff_check(&mut store, &["logits"], &grads, 1e-4, loss).unwrap();
    assert!(report.max_err < 1e-4, "worst: {}", report.worst_param);
}

#[test]
fn mixed_op_chain_matches_finite_differences() {
    // Exercises div/recip/sqrt/ln/min/concat/slice/broadcast in one chain.
    let mut store = store_with(&[
        ("a", random_mat(2, 3, 13, 1.0).mapv(|v| v.abs() + 0.5)),
        ("b", random_mat(2, 3, 14, 1.0).mapv(|v| v.abs() + 0.5)),
    ]);
    let build = |tape: &mut Tape, s: &ParamStore| -> Result<Var, DiffError> {
        let a = tape.param(Binding::Trainable(s), "a")?;
        let b = tape.param(Binding::Trainable(s), "b")?;
        let q = tape.div(a, b);
        let r = tape.recip(b);
        let sq = tape.sqrt(a);
        let ln = tape.ln(b);
        let mn = tape.min_elem(q, r);
        let cat = tape.concat_cols(&[mn, sq, ln]);
        let sl = tape.slice_cols(cat, 2, 5);
        let sums = tape.sum_rows_canonical(sl);
        let wide = tape.broadcast_row(sums, 4);
        let sp = tape.softplus(wide);
        Ok(tape.mean_all(sp))
    };
    let mut tape = Tape::new();
    let l = build(&mut tape, &store).unwrap();
    let mut grads = Grads::zeros(&store);
    tape.backward(l, &mut grads).unwrap();
    let loss = move |s: &ParamStore| -> Result<f64, DiffError> {
        let mut t = Tape::new();
        let l = build(&mut t, s)?;
        Ok(t.value(l)[(0, 0)])
    };
    let report = finite_diff_check(&mut store, &["a", "b"], &grads, 1e-5, loss).unwrap();
    assert!(report.max_err < 1e-4, "worst: {}", report.worst_param);
}

#[test]
fn adam_ignores_zero_gradients_and_steps_at_lr_scale() {
    let mut store = store_with(&[("w", scalar(2.0))]);
    let cfg = AdamConfig::default();

    // No gradient recorded -> parameter untouched.
    let grads = Grads::zeros(&store);
    store.adam_step(&grads, "w", cfg).unwrap();
    assert_eq!(store.value("w").unwrap()[(0, 0)], 2.0);

    // First step moves by ~lr against the gradient sign.
    let mut grads = Grads::zeros(&store);
    grads.accumulate(store.slot("w").unwrap(), &scalar(3.7));
    store.adam_step(&grads, "w", cfg).unwrap();
    let moved = store.value("w").unwrap()[(0, 0)];
    assert!(relative_error(2.0 - moved, cfg.lr) < 1e-6);

    // Under a constant gradient the step magnitude converges to lr.
    let mut store = store_with(&[("w", scalar(0.0))]);
    let mut grads = Grads::zeros(&store);
    grads.accumulate(store.slot("w").unwrap(), &scalar(-1.25));
    let mut prev = 0.0;
    let mut step_size = 0.0;
    for _ in 0..400 {
        store.adam_step(&grads, "w", cfg).unwrap();
        let now = store.value("w").unwrap()[(0, 0)];
        step_size = now - prev;
        prev = now;
    }
    assert!(relative_error(step_size, cfg.lr) < 1e-3);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = store_with(&[("w", scalar(1.0))]);
    let mut grads = Grads::zeros(&store);
    grads.accumulate(store.slot("w").unwrap(), &scalar(f64::NAN));
    let err = store.adam_step(&grads, "w", AdamConfig::default());
    assert!(matches!(err, Err(DiffError::NonFinite { .. })));
}

#[test]
fn soft_update_interpolates_by_eta() {
    let mut store = store_with(&[
        ("online/w", scalar(1.0)),
        ("target/w", scalar(0.0)),
    ]);
    soft_update(&mut store, "target/", "online/", 0.005).unwrap();
    assert!((store.value("target/w").unwrap()[(0, 0)] - 0.005).abs() < 1e-15);

    store.set_value("target/w", scalar(0.25)).unwrap();
    soft_update(&mut store, "target/", "online/", 1.0).unwrap();
    assert_eq!(store.value("target/w").unwrap()[(0, 0)], 1.0);

    store.set_value("target/w", scalar(0.25)).unwrap();
    soft_update(&mut store, "target/", "online/", 0.0).unwrap();
    assert_eq!(store.value("target/w").unwrap()[(0, 0)], 0.25);
}

#[test]
fn soft_update_requires_matching_names_and_shapes() {
    let mut store = store_with(&[("online/w", scalar(1.0))]);
    assert!(soft_update(&mut store, "target/", "online/", 0.5).is_err());
    let mut store = store_with(&[
        ("online/w", Mat::zeros((2, 2))),
        ("target/w", Mat::zeros((2, 3))),
    ]);
    assert!(soft_update(&mut store, "target/", "online/", 0.5).is_err());
}

#[test]
fn init_and_forward_are_deterministic() {
    let spec = NetSpec::mlp(&[6, 8, 2]);
    let mut s1 = ParamStore::new();
    let mut s2 = ParamStore::new();
    init_net(&mut s1, "net", &spec, 1234).unwrap();
    init_net(&mut s2, "net", &spec, 1234).unwrap();
    for name in s1.names() {
        assert_eq!(s1.value(name).unwrap(), s2.value(name).unwrap());
    }
    let input = random_mat(4, 6, 15, 1.0);
    let run = |s: &ParamStore| {
        let mut t = Tape::new();
        let x = t.constant(input.clone());
        let y = net_forward(&mut t, Binding::Trainable(s), "net", &spec, x).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(&s1), run(&s2));
}

#[test]
fn canonical_sum_is_order_free() {
    let mut a = vec![1e16, 1.0, -1e16, 3.5, 0.25];
    let mut b = vec![0.25, -1e16, 3.5, 1.0, 1e16];
    assert_eq!(canonical_sum(&mut a), canonical_sum(&mut b));
}

fn init_net_for_test(store: &mut ParamStore, prefix: &str, spec: &NetSpec, seed: u64) {
    init_net(store, prefix, spec, seed).unwrap();
}
