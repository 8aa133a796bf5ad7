use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Central-difference audit of one tape graph. `build` must be a pure
/// function of the input tensors; the loss is whatever 1x1 node it returns.
fn fd_check(
    inputs: &mut [Tensor<f64>],
    build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
    h: f64,
    tol: f64,
) {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        vars.iter()
            .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect()
    };
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).data[0]
    };
    for ti in 0..inputs.len() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            inputs[ti].data_mut()[i] = orig + h;
            let up = eval(inputs);
            inputs[ti].data_mut()[i] = orig - h;
            let down = eval(inputs);
            inputs[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                rel <= tol,
                "input {ti} coord {i}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}

/// Project a node down to 1x1 with a fixed pseudo-random weighting so every
/// output coordinate influences the loss differently (a plain sum would hide
/// softmax's shift invariance).
fn project(tape: &mut Tape<'_, f64>, v: Var, seed: u64) -> Var {
    let (r, c) = tape.dims(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(r, c, uniform(&mut rng, r * c, -1.0, 1.0)).unwrap();
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod).unwrap()
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::matrix(r, c, uniform(rng, r * c, -2.0, 2.0))
        .unwrap()
        .with_grad()
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn gelu_matches_reference_value() {
    assert!((kernels::gelu(1.0_f64) - 0.84119).abs() < 1e-5);
    assert_eq!(kernels::gelu(0.0_f64), 0.0);
}

#[test]
fn softmax_matches_reference_value() {
    let x = Tensor::<f64>::new(vec![2], vec![1.0, 2.0]).unwrap();
    let s = softmax(&x, 0).unwrap();
    assert!((s.data()[0] - 0.26894).abs() < 1e-5);
    assert!((s.data()[1] - 0.73106).abs() < 1e-5);
}

#[test]
fn softmax_rejects_non_finite_input() {
    let x = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(softmax(&x, 0), Err(Error::Numeric { .. })));
}

#[test]
fn matmul_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut inputs = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2)];
    fd_check(
        &mut inputs,
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            project(t, y, 10)
        },
        H,
        TOL,
    );
}

#[test]
fn matmul_tb_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut inputs = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 2, 4)];
    fd_check(
        &mut inputs,
        |t, v| {
            let y = t.matmul_tb(v[0], v[1]).unwrap();
            project(t, y, 11)
        },
        H,
        TOL,
    );
}

#[test]
fn elementwise_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut inputs = vec![rand_mat(&mut rng, 2, 5), rand_mat(&mut rng, 2, 5)];
    fd_check(
        &mut inputs,
        |t, v| {
            let s = t.sub(v[0], v[1]).unwrap();
            let m = t.mul(s, v[1]).unwrap();
            let sc = t.scale(m, 1.7).unwrap();
            project(t, sc, 12)
        },
        H,
        TOL,
    );
}

#[test]
fn bias_broadcast_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut inputs = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 1, 4)];
    fd_check(
        &mut inputs,
        |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, 13)
        },
        H,
        TOL,
    );
}

#[test]
fn activation_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inputs = vec![rand_mat(&mut rng, 2, 6)];
    fd_check(
        &mut inputs,
        |t, v| {
            let g = t.gelu(v[0]).unwrap();
            let th = t.tanh(g).unwrap();
            let si = t.sigmoid(th).unwrap();
            project(t, si, 14)
        },
        H,
        TOL,
    );
}

#[test]
fn log_floor_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Positive lane, away from the floor.
    let data = uniform(&mut rng, 8, 0.05, 2.0);
    let mut inputs = vec![Tensor::matrix(2, 4, data).unwrap().with_grad()];
    fd_check(
        &mut inputs,
        |t, v| {
            let l = t.log_floor(v[0]).unwrap();
            project(t, l, 15)
        },
        H,
        TOL,
    );
}

#[test]
fn log_floor_clamps_below_floor() {
    let x = Tensor::matrix(1, 2, vec![-0.5, 1.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x).unwrap();
    let l = tape.log_floor(v).unwrap();
    assert!((tape.value(l).data[0] - 1e-12_f64.ln()).abs() < 1e-9);
    let s = tape.sum(l).unwrap();
    let grads = tape.backward(s).unwrap();
    let g = grads.get(v).unwrap();
    assert_eq!(g[0], 0.0);
    assert!((g[1] - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for axis in [0, 1] {
        let mut inputs = vec![rand_mat(&mut rng, 3, 4)];
        fd_check(
            &mut inputs,
            |t, v| {
                let s = t.softmax(v[0], axis).unwrap();
                project(t, s, 16 + axis as u64)
            },
            H,
            TOL,
        );
    }
}

#[test]
fn reduction_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut inputs = vec![rand_mat(&mut rng, 3, 4)];
    fd_check(
        &mut inputs,
        |t, v| {
            let mr = t.mean_rows(v[0]).unwrap();
            let proj = project(t, mr, 18);
            let m = t.mean(v[0]).unwrap();
            let s = t.sum(v[0]).unwrap();
            let a = t.add(proj, m).unwrap();
            let sc = t.scale(s, 0.3).unwrap();
            t.add(a, sc).unwrap()
        },
        H,
        TOL,
    );
}

#[test]
fn structural_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut inputs = vec![rand_mat(&mut rng, 2, 3), rand_mat(&mut rng, 2, 3)];
    fd_check(
        &mut inputs,
        |t, v| {
            let rows = t.concat_rows(&[v[0], v[1]]).unwrap();
            let cols = t.concat_cols(&[v[0], v[1]]).unwrap();
            let r1 = t.row(rows, 2).unwrap();
            let sl = t.slice_cols(cols, 1, 3).unwrap();
            let p = t.pick(cols, 1, 4).unwrap();
            let a = project(t, r1, 19);
            let b = project(t, sl, 20);
            let ab = t.add(a, b).unwrap();
            t.add(ab, p).unwrap()
        },
        H,
        TOL,
    );
}

#[test]
fn layer_norm_grads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut inputs = vec![
        rand_mat(&mut rng, 3, 5),
        rand_mat(&mut rng, 1, 5),
        rand_mat(&mut rng, 1, 5),
    ];
    fd_check(
        &mut inputs,
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            project(t, y, 21)
        },
        H,
        TOL,
    );
}

#[test]
fn fan_out_accumulates_gradients() {
    let x = Tensor::<f64>::matrix(1, 3, vec![1.0, 2.0, 3.0])
        .unwrap()
        .with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x).unwrap();
    // loss = sum(x*x) + sum(x+x): d/dx = 2x + 2.
    let sq = tape.mul(v, v).unwrap();
    let dbl = tape.add(v, v).unwrap();
    let s1 = tape.sum(sq).unwrap();
    let s2 = tape.sum(dbl).unwrap();
    let loss = tape.add(s1, s2).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(v).unwrap();
    for (i, &x) in x.data().iter().enumerate() {
        assert!((g[i] - (2.0 * x + 2.0)).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&x).unwrap();
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

#[test]
fn no_grad_leaves_receive_no_gradient() {
    let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap().with_grad();
    let c = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let vx = tape.leaf(&x).unwrap();
    let vc = tape.leaf(&c).unwrap();
    let m = tape.mul(vx, vc).unwrap();
    let loss = tape.sum(m).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(vc).is_none());
    assert_eq!(grads.get(vx).unwrap(), &[3.0, 4.0]);
}

#[test]
fn dimension_mismatch_is_reported() {
    let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
    let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
    let mut tape = Tape::<f64>::new();
    let va = tape.leaf(&a).unwrap();
    let vb = tape.leaf(&b).unwrap();
    assert!(matches!(
        tape.matmul(va, vb),
        Err(Error::Dimension { op: "matmul", .. })
    ));
}

#[test]
fn tensor_shape_must_match_data() {
    assert!(Tensor::new(vec![2, 3], vec![0.0_f64; 5]).is_err());
    assert!(Tensor::new(vec![2, 2, 2], vec![0.0_f64; 8])
        .unwrap()
        .mat_dims()
        .is_err());
}

#[test]
fn adam_zero_lr_is_identity() {
    let mut params = vec![1.0, -2.0, 3.5];
    let before = params.clone();
    let mut state = AdamState::new(3);
    let hyper = AdamHyper {
        lr: 0.0,
        ..AdamHyper::default()
    };
    for _ in 0..5 {
        adam_step(&mut params, &[0.3, -0.1, 2.0], &mut state, &hyper).unwrap();
    }
    assert_eq!(params, before);
    assert_eq!(state.step_count(), 5);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut params = vec![1.0, 2.0];
    let before = params.clone();
    let mut state = AdamState::new(2);
    let err = adam_step(
        &mut params,
        &[f64::NAN, 0.0],
        &mut state,
        &AdamHyper::default(),
    );
    assert!(matches!(err, Err(Error::Numeric { .. })));
    assert_eq!(params, before);
    assert_eq!(state.step_count(), 0);
}

#[test]
fn adam_minimizes_a_quadratic() {
    // loss = (p - 3)^2, gradient 2(p - 3).
    let mut params = vec![0.0_f64];
    let mut state = AdamState::new(1);
    let hyper = AdamHyper {
        lr: 0.05,
        ..AdamHyper::default()
    };
    for _ in 0..2000 {
        let g = 2.0 * (params[0] - 3.0);
        adam_step(&mut params, &[g], &mut state, &hyper).unwrap();
    }
    assert!((params[0] - 3.0).abs() < 1e-3, "got {}", params[0]);
}

#[test]
fn checkpoint_roundtrip_preserves_entries_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.ck");
    let mut ck = Checkpoint::new();
    ck.set_manifest("arch=lstm\nhidden=32\n").unwrap();
    ck.push("enc.w", vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125])
        .unwrap();
    ck.push("enc.b", vec![3], vec![0.0, 1e-300, f64::MAX]).unwrap();
    write_checkpoint(&path, &ck).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.manifest().unwrap().unwrap(), "arch=lstm\nhidden=32\n");
    let names: Vec<&str> = back.tensors().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["enc.w", "enc.b"]);
}

#[test]
fn checkpoint_write_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = Checkpoint::new();
    ck.push("w", vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let p1 = dir.path().join("a.ck");
    let p2 = dir.path().join("b.ck");
    write_checkpoint(&p1, &ck).unwrap();
    write_checkpoint(&p2, &ck).unwrap();
    assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
}

#[test]
fn checkpoint_bad_magic_reports_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ck");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    match read_checkpoint(&path) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn checkpoint_truncation_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.ck");
    let full = dir.path().join("full.ck");
    let mut ck = Checkpoint::new();
    ck.push("w", vec![2], vec![1.0, 2.0]).unwrap();
    write_checkpoint(&full, &ck).unwrap();
    let bytes = std::fs::read(&full).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match read_checkpoint(&path) {
        Err(Error::Format { offset, detail, .. }) => {
            assert!(offset > 0, "offset {offset}");
            assert!(detail.contains("truncated"), "detail {detail}");
        }
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn checkpoint_rejects_duplicate_names() {
    let mut ck = Checkpoint::new();
    ck.push("w", vec![1], vec![1.0]).unwrap();
    assert!(ck.push("w", vec![1], vec![2.0]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..6, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::matrix(rows, cols, uniform(&mut rng, rows * cols, -30.0, 30.0)).unwrap();
        let s = softmax(&x, 1).unwrap();
        for r in 0..rows {
            let sum: f64 = s.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(s.data()[r * cols..(r + 1) * cols].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..6, shift in -50.0f64..50.0, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = uniform(&mut rng, cols, -10.0, 10.0);
        let shifted: Vec<f64> = data.iter().map(|&v| v + shift).collect();
        let a = softmax(&Tensor::new(vec![cols], data).unwrap(), 0).unwrap();
        let b = softmax(&Tensor::new(vec![cols], shifted).unwrap(), 0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_agrees_with_transposed_kernels(m in 1usize..4, k in 1usize..4, n in 1usize..4, seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, m * k, -2.0, 2.0);
        let b = uniform(&mut rng, k * n, -2.0, 2.0);
        // b^T stored as n*k, fed through the a*b^T kernel, must match plain a*b.
        let mut bt = vec![0.0; n * k];
        for r in 0..k {
            for c in 0..n {
                bt[c * k + r] = b[r * n + c];
            }
        }
        let plain = kernels::matmul(&a, m, k, &b, n);
        let viatb = kernels::matmul_tb(&a, m, k, &bt, n);
        for (x, y) in plain.iter().zip(&viatb) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
