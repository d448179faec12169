use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn params(entries: &[(&str, Tensor)]) -> TensorMap {
    entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, 5, 7).map(|v| v * 40.0));
    let y = g.softmax(x).unwrap();
    for i in 0..5 {
        let s: f64 = g.value(y).row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, 3, 4);
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let i = g.constant(Tensor::identity(4));
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn layer_norm_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 6], 3.25));
    let gain = g.constant(Tensor::full(&[6], 1.0));
    let bias = g.constant(Tensor::zeros(&[6]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(g.add(a, b).is_ok());
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    assert!(matches!(g.cross_entropy(a, &[0, 5], &[1.0, 1.0]), Err(Error::Shape { .. })));
}

#[test]
fn sum_gradient_is_ones() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::full(&[3, 2], 0.7));
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert!(grads["x"].data().iter().all(|&v| v == 1.0));
}

#[test]
fn zero_scaled_gradient_is_zero() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::full(&[4], 2.0));
    let z = g.scale(x, 0.0);
    let l = g.sum(z);
    let grads = g.backward(l).unwrap();
    assert!(grads["x"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn unreachable_params_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::full(&[2], 1.0));
    let _unused = g.param("unused", &Tensor::full(&[3], 1.0));
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads["unused"], Tensor::zeros(&[3]));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::full(&[2], 1.0));
    assert!(matches!(g.backward(x), Err(Error::Shape { op: "backward", .. })));
}

#[test]
fn softmax_xe_gradient_is_probs_minus_onehot() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = rand_tensor(&mut rng, 4, 6);
    let targets = [0, 5, 2, 2];
    let mut g = Graph::new();
    let x = g.param("logits", &logits);
    let l = g.cross_entropy(x, &targets, &[1.0; 4]).unwrap();
    let grads = g.backward(l).unwrap();
    let mut probs = vec![0.0; 6];
    for (i, &y) in targets.iter().enumerate() {
        kernels::softmax_row(logits.row(i), &mut probs);
        for j in 0..6 {
            let expected = probs[j] - if j == y { 1.0 } else { 0.0 };
            assert!((grads["logits"].at(i, j) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn fd_quadratic_is_exact() {
    let p = params(&[("x", Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.01, -0.7]).unwrap())]);
    let err = finite_difference_check(
        |g, p| {
            let x = g.param("x", &p["x"]);
            let sq = g.mul(x, x)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn fd_rejects_zero_eps() {
    let p = params(&[("x", Tensor::full(&[2], 1.0))]);
    let r = finite_difference_check(
        |g, p| {
            let x = g.param("x", &p["x"]);
            Ok(g.sum(x))
        },
        &p,
        0.0,
    );
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn fd_rejects_nondeterministic_loss() {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let calls = AtomicUsize::new(0);
    let p = params(&[("x", Tensor::full(&[2], 1.0))]);
    let r = finite_difference_check(
        |g, p| {
            let x = g.param("x", &p["x"]);
            let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
            let s = g.sum(x);
            Ok(g.scale(s, 1.0 + k))
        },
        &p,
        1e-5,
    );
    assert!(matches!(r, Err(Error::NonDeterministic(_))));
}

#[test]
fn fd_softmax_xe_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = params(&[("w", rand_tensor(&mut rng, 3, 5))]);
    let err = finite_difference_check(
        |g, p| {
            let w = g.param("w", &p["w"]);
            g.cross_entropy(w, &[1, 4, 0], &[1.0, 0.5, 2.0])
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn mlp_loss(g: &mut Graph, p: &TensorMap, input: &Tensor) -> crate::Result<Var> {
    let x = g.constant(input.clone());
    let mut h = x;
    for layer in 0..3 {
        let w = g.param(format!("w{layer}"), &p[&format!("w{layer}")]);
        let b = g.param(format!("b{layer}"), &p[&format!("b{layer}")]);
        let z = g.matmul(h, w)?;
        let z = g.add(z, b)?;
        h = if layer < 2 { g.gelu(z) } else { z };
    }
    g.cross_entropy(h, &[0, 2, 1, 3], &[1.0; 4])
}

#[test]
fn fd_random_three_layer_mlp() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let input = rand_tensor(&mut rng, 4, 6);
        let p = params(&[
            ("w0", rand_tensor(&mut rng, 6, 8)),
            ("b0", rand_tensor(&mut rng, 1, 8)),
            ("w1", rand_tensor(&mut rng, 8, 8)),
            ("b1", rand_tensor(&mut rng, 1, 8)),
            ("w2", rand_tensor(&mut rng, 8, 4)),
            ("b2", rand_tensor(&mut rng, 1, 4)),
        ]);
        let err = finite_difference_check(|g, p| mlp_loss(g, p, &input), &p, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

/// One loss touching every op in the closed set.
pub(crate) fn every_op_loss(g: &mut Graph, p: &TensorMap) -> crate::Result<Var> {
    let a = g.param("a", &p["a"]); // 4x6
    let b = g.param("b", &p["b"]); // 6x5
    let c = g.param("c", &p["c"]); // 3x6
    let gain = g.param("gain", &p["gain"]); // 5
    let bias = g.param("bias", &p["bias"]); // 5
    let table = g.param("table", &p["table"]); // 7x6
    let pos = g.param("pos", &p["pos"]); // 4x6 positive entries

    let e = g.gather(table, &[3, 0, 3, 6])?;
    let ae = g.add(a, e)?;
    let prod = g.mul(ae, a)?;
    let h = g.matmul(prod, b)?;
    let h = g.add(h, bias)?;
    let h = g.layer_norm(h, gain, bias)?;
    let h = g.gelu(h);
    let att = g.matmul_nt(a, c)?; // 4x3
    let att = g.scale(att, 0.5);
    let att = g.softmax(att)?;
    let both = g.concat(&[h, att], 1)?; // 4x8
    let top = g.slice(both, 0, 1, 3)?; // 3x8
    let left = g.slice(top, 1, 2, 5)?; // 3x5
    let stacked = g.concat(&[left, h], 0)?; // 7x5
    let xe = g.cross_entropy(stacked, &[0, 1, 2, 3, 4, 0, 1], &[1.0, 0.5, -0.3, 2.0, 1.0, 1.0, 0.7])?;
    let lg = g.log(pos)?;
    let lm = g.mean(lg)?;
    let total = g.sum(stacked);
    let sm = g.scale(total, 0.1);
    let l = g.add(xe, lm)?;
    g.add(l, sm)
}

pub(crate) fn every_op_params(seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params(&[
        ("a", rand_tensor(&mut rng, 4, 6)),
        ("b", rand_tensor(&mut rng, 6, 5)),
        ("c", rand_tensor(&mut rng, 3, 6)),
        ("gain", Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap()),
        ("bias", Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()),
        ("table", rand_tensor(&mut rng, 7, 6)),
        ("pos", Tensor::from_fn(4, 6, |_, _| rng.gen_range(0.5..2.0))),
    ])
}

#[test]
fn fd_every_op_twenty_seeds() {
    for seed in 0..20 {
        let p = every_op_params(seed);
        let err = finite_difference_check_with(every_op_loss, &p, 1e-5, 64).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn forward_backward_bit_identical() {
    let p = every_op_params(9);
    let run = || {
        let mut g = Graph::new();
        let l = every_op_loss(&mut g, &p).unwrap();
        (g.value(l).item().to_bits(), g.backward(l).unwrap())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    for (k, t) in &g1 {
        let bits1: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = g2[k].data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2, "{k}");
    }
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(g.log(x).is_err());
}

#[test]
fn tensor_rejects_bad_length() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
}
