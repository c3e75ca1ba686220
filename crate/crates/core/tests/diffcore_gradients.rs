//! Finite-difference and closed-form checks for every recorded primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sws_core::diffcore::{compare_gradients, grad_check, DiffError, Graph, Tensor, Var};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-5;

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so gradients are not uniform.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, DiffError> {
    let w = uniform(g.shape(x), seed);
    let wv = g.constant(&w);
    let prod = g.mul(x, wv)?;
    Ok(g.sum(prod))
}

fn assert_pass(name: &str, report: sws_core::diffcore::GradCheckReport) {
    assert!(
        report.passed,
        "{name}: max rel err {:.3e} at {}",
        report.max_rel_err, report.worst_index
    );
}

#[test]
fn matmul_identity_and_hand_value() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(&Tensor::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = g.constant(&uniform(&[2, 5], 1));
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let a = g.constant(&Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
    let b = g.constant(&Tensor::from_f64([2, 1], &[3.0, 4.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(&Tensor::zeros([2, 3]));
    let b = g.constant(&Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_is_row_broadcast_of_b_column_sums() {
    let a = uniform(&[3, 4], 2);
    let b = uniform(&[4, 5], 3);
    let mut g = Graph::<f64>::new();
    let av = g.param(&a);
    let bv = g.constant(&b);
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let grad = g.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = b.data()[k * 5..(k + 1) * 5].iter().sum();
            assert!((grad[i * 4 + k] - row_sum).abs() < 1e-12);
        }
    }
    let report = grad_check(
        |g, x| {
            let bv = g.constant(&b);
            let c = g.matmul(x, bv)?;
            Ok(g.sum(c))
        },
        &a,
        STEP,
        1e-6,
    )
    .unwrap();
    assert_pass("matmul", report);
}

#[test]
fn matmul_gradient_wrt_rhs() {
    let a = uniform(&[3, 4], 4);
    let b = uniform(&[4, 2], 5);
    let report = grad_check(
        |g, x| {
            let av = g.constant(&a);
            let c = g.matmul(av, x)?;
            weighted_sum(g, c, 6)
        },
        &b,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("matmul rhs", report);
}

#[test]
fn bmm_gradients_both_layouts() {
    for &trans_b in &[false, true] {
        let a = uniform(&[2, 3, 4], 7);
        let b_shape = if trans_b { [2, 5, 4] } else { [2, 4, 5] };
        let b = uniform(&b_shape, 8);
        let ra = grad_check(
            |g, x| {
                let bv = g.constant(&b);
                let c = g.bmm(x, bv, trans_b)?;
                weighted_sum(g, c, 9)
            },
            &a,
            STEP,
            TOL,
        )
        .unwrap();
        assert_pass("bmm lhs", ra);
        let rb = grad_check(
            |g, x| {
                let av = g.constant(&a);
                let c = g.bmm(av, x, trans_b)?;
                weighted_sum(g, c, 9)
            },
            &b,
            STEP,
            TOL,
        )
        .unwrap();
        assert_pass("bmm rhs", rb);
    }
}

#[test]
fn bmm_trans_b_matches_explicit_transpose() {
    let a = uniform(&[2, 3, 4], 10);
    let b = uniform(&[2, 5, 4], 11);
    let mut g = Graph::<f64>::new();
    let av = g.constant(&a);
    let bv = g.constant(&b);
    let direct = g.bmm(av, bv, true).unwrap();
    let bt = g.permute(bv, &[0, 2, 1]).unwrap();
    let explicit = g.bmm(av, bt, false).unwrap();
    for (x, y) in g.value(direct).iter().zip(g.value(explicit)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::from_f64([1, 2], &[0.0, 0.0]).unwrap());
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y), &[0.5, 0.5]);

    let x = g.constant(&Tensor::from_f64([3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap());
    let y = g.softmax(x).unwrap();
    for (got, want) in g.value(y).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_shift_invariance_and_normalization() {
    // Dyadic inputs keep x + c exact, so max-subtraction yields identical rows.
    let base: Vec<f64> = (0..12).map(|i| (i as f64 - 5.0) * 0.25).collect();
    let shifted: Vec<f64> = base.iter().map(|v| v + 3.0).collect();
    let mut g = Graph::<f64>::new();
    let a = g.constant(&Tensor::from_f64([3, 4], &base).unwrap());
    let b = g.constant(&Tensor::from_f64([3, 4], &shifted).unwrap());
    let ya = g.softmax(a).unwrap();
    let yb = g.softmax(b).unwrap();
    assert_eq!(g.value(ya), g.value(yb));

    let x32 = uniform(&[6, 7], 12).cast::<f32>();
    let x32s = Tensor::new([6, 7], x32.data().iter().map(|v| v + 1.7).collect()).unwrap();
    let mut g = Graph::<f32>::new();
    let a = g.constant(&x32);
    let b = g.constant(&x32s);
    let ya = g.softmax(a).unwrap();
    let yb = g.softmax(b).unwrap();
    for (p, q) in g.value(ya).iter().zip(g.value(yb)) {
        assert!((p - q).abs() < 1e-6);
    }
    for row in g.value(ya).chunks(7) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::from_f64([2], &[f64::NAN, 0.0]).unwrap());
    assert_eq!(g.softmax(x).unwrap_err(), DiffError::NonFinite { op: "softmax" });
}

#[test]
fn softmax_gradient() {
    let report = grad_check(
        |g, x| {
            let y = g.softmax(x)?;
            weighted_sum(g, y, 13)
        },
        &uniform(&[3, 5], 14),
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("softmax", report);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let gamma = g.constant(&Tensor::full([2], 1.0));
    let beta = g.constant(&Tensor::zeros([2]));
    let x = g.constant(&Tensor::from_f64([1, 2], &[1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    assert!((g.value(y)[0] + 1.0).abs() < 1e-9);
    assert!((g.value(y)[1] - 1.0).abs() < 1e-9);

    let gamma = g.constant(&Tensor::full([4], 1.0));
    let beta = g.constant(&Tensor::zeros([4]));
    let c = g.constant(&Tensor::full([2, 4], 3.5));
    let y = g.layer_norm(c, gamma, beta, 1e-6).unwrap();
    assert!(g.value(y).iter().all(|&v| v == 0.0));

    assert!(g.layer_norm(c, gamma, beta, 0.0).is_err());
}

#[test]
fn layer_norm_gradients() {
    let x = uniform(&[4, 8], 15);
    let gamma = uniform(&[8], 16);
    let beta = uniform(&[8], 17);
    let rx = grad_check(
        |g, v| {
            let (gm, bt) = (g.constant(&gamma), g.constant(&beta));
            let y = g.layer_norm(v, gm, bt, 1e-5)?;
            weighted_sum(g, y, 18)
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("layer_norm x", rx);
    let rg = grad_check(
        |g, v| {
            let (xv, bt) = (g.constant(&x), g.constant(&beta));
            let y = g.layer_norm(xv, v, bt, 1e-5)?;
            weighted_sum(g, y, 18)
        },
        &gamma,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("layer_norm gamma", rg);
    let rb = grad_check(
        |g, v| {
            let (xv, gm) = (g.constant(&x), g.constant(&gamma));
            let y = g.layer_norm(xv, gm, v, 1e-5)?;
            weighted_sum(g, y, 18)
        },
        &beta,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("layer_norm beta", rb);
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::from_f64([3], &[0.0, 10.0, -10.0]).unwrap());
    let y = g.gelu(x);
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    assert!(v[2].abs() < 1e-6);
}

#[test]
fn gelu_gradient_at_half() {
    let x = Tensor::from_f64([1], &[0.5]).unwrap();
    let report = grad_check(
        |g, v| {
            let y = g.gelu(v);
            Ok(g.sum(y))
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("gelu", report);
    let report = grad_check(
        |g, v| {
            let y = g.gelu(v);
            weighted_sum(g, y, 19)
        },
        &uniform(&[20], 20),
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("gelu random", report);
}

fn softmax_f64(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn soft_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let u = g.constant(&Tensor::full([1, 2], 0.5));
    let l = g.soft_cross_entropy(u, u).unwrap();
    assert!((g.item(l) - 2f64.ln()).abs() < 1e-15);

    let q = [0.2, 0.7, 0.1];
    let p = g.constant(&Tensor::from_f64([1, 3], &[0.0, 1.0, 0.0]).unwrap());
    let qv = g.constant(&Tensor::from_f64([1, 3], &q).unwrap());
    let l = g.soft_cross_entropy(p, qv).unwrap();
    assert!((g.item(l) + 0.7f64.ln()).abs() < 1e-15);

    // Scalar oracle: −Σ p ln q evaluated directly.
    let p = softmax_f64(&[2.0, 0.0]);
    let q = softmax_f64(&[0.0, 2.0]);
    let expected = -(p[0] * q[0].ln() + p[1] * q[1].ln());
    let pv = g.constant(&Tensor::from_f64([1, 2], &p).unwrap());
    let qv = g.constant(&Tensor::from_f64([1, 2], &q).unwrap());
    let l = g.soft_cross_entropy(pv, qv).unwrap();
    assert!((g.item(l) - expected).abs() < 1e-14);
    // mpmath, 30 digits: 1.888522166998737384563185
    assert!((expected - 1.888_522_166_998_737_4).abs() < 1e-14);
}

#[test]
fn soft_cross_entropy_clamps_log_of_zero() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(&Tensor::from_f64([1, 2], &[0.5, 0.5]).unwrap());
    let q = g.param(&Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap());
    let l = g.soft_cross_entropy(p, q).unwrap();
    assert!((g.item(l) - 15.0).abs() < 1e-12);
    g.backward(l).unwrap();
    let grad = g.grad(q).unwrap();
    assert!(grad.iter().all(|v| v.is_finite()));
    assert_eq!(grad[1], 0.0);

    let bad = g.constant(&Tensor::zeros([2, 2]));
    assert!(matches!(
        g.soft_cross_entropy(p, bad),
        Err(DiffError::Shape { .. })
    ));
}

#[test]
fn soft_cross_entropy_gradients() {
    let p = {
        let raw = uniform(&[3, 4], 21);
        let rows: Vec<f64> = raw.data().chunks(4).flat_map(softmax_f64).collect();
        Tensor::new([3, 4], rows).unwrap()
    };
    let z = uniform(&[3, 4], 22);
    let report = grad_check(
        |g, v| {
            let pv = g.constant(&p);
            let q = g.softmax(v)?;
            g.soft_cross_entropy(pv, q)
        },
        &z,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("sce wrt logits", report);
    let q = {
        let rows: Vec<f64> = z.data().chunks(4).flat_map(softmax_f64).collect();
        Tensor::new([3, 4], rows).unwrap()
    };
    let report = grad_check(
        |g, v| {
            let qv = g.constant(&q);
            g.soft_cross_entropy(v, qv)
        },
        &p,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("sce wrt targets", report);
}

#[test]
fn backward_square_sum_gives_twice_x() {
    let x = uniform(&[5], 23);
    let mut g = Graph::<f64>::new();
    let xv = g.param(&x);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    for (gr, v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*gr, 2.0 * v);
    }
}

#[test]
fn backward_cross_entropy_identity() {
    let z = uniform(&[4, 3], 24);
    let labels = [2usize, 0, 1, 1];
    let mut onehot = vec![0.0; 12];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * 3 + y] = 1.0;
    }
    let mut g = Graph::<f64>::new();
    let zv = g.param(&z);
    let q = g.softmax(zv).unwrap();
    let p = g.constant(&Tensor::new([4, 3], onehot.clone()).unwrap());
    let l = g.soft_cross_entropy(p, q).unwrap();
    g.backward(l).unwrap();
    let probs: Vec<f64> = z.data().chunks(3).flat_map(softmax_f64).collect();
    for i in 0..12 {
        let want = (probs[i] - onehot[i]) / 4.0;
        assert!((g.grad(zv).unwrap()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn backward_twice_doubles_leaf_gradient() {
    let x = uniform(&[3, 3], 25);
    let mut g = Graph::<f64>::new();
    let xv = g.param(&x);
    let y = g.gelu(xv);
    let l = g.sum(y);
    g.backward(l).unwrap();
    let once = g.grad(xv).unwrap().to_vec();
    g.backward(l).unwrap();
    for (a, b) in g.grad(xv).unwrap().iter().zip(&once) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.param(&uniform(&[2], 26));
    assert!(matches!(g.backward(x), Err(DiffError::Contract(_))));
}

#[test]
fn parameter_used_at_several_sites_sums_site_gradients() {
    // W used three times in a chain: y = ((x W) W) W.
    let w = uniform(&[3, 3], 27);
    let x = uniform(&[2, 3], 28);
    let mut g = Graph::<f64>::new();
    let wv = g.param(&w);
    let xv = g.constant(&x);
    let mut h = xv;
    for _ in 0..3 {
        h = g.matmul(h, wv).unwrap();
    }
    let l = weighted_sum(&mut g, h, 29).unwrap();
    g.backward(l).unwrap();
    let tied = g.grad(wv).unwrap().to_vec();

    // Same chain with three independent copies.
    let mut g = Graph::<f64>::new();
    let copies: Vec<Var> = (0..3).map(|_| g.param(&w)).collect();
    let xv = g.constant(&x);
    let mut h = xv;
    for &c in &copies {
        h = g.matmul(h, c).unwrap();
    }
    let l = weighted_sum(&mut g, h, 29).unwrap();
    g.backward(l).unwrap();
    for i in 0..9 {
        let sum: f64 = copies.iter().map(|&c| g.grad(c).unwrap()[i]).sum();
        assert!((tied[i] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
    }
}

#[test]
fn composite_three_layer_graph() {
    let w1 = uniform(&[6, 8], 30);
    let w2 = uniform(&[8, 8], 31);
    let w3 = uniform(&[8, 4], 32);
    let gamma = uniform(&[8], 33);
    let beta = uniform(&[8], 34);
    let x = uniform(&[5, 6], 35);
    let net = |g: &mut Graph<f64>, xv: Var, w1v: Var| -> Result<Var, DiffError> {
        let h = g.matmul(xv, w1v)?;
        let (gm, bt) = (g.constant(&gamma), g.constant(&beta));
        let h = g.layer_norm(h, gm, bt, 1e-5)?;
        let h = g.gelu(h);
        let w2v = g.constant(&w2);
        let h2 = g.matmul(h, w2v)?;
        let h = g.add(h, h2)?;
        let w3v = g.constant(&w3);
        let z = g.matmul(h, w3v)?;
        let q = g.softmax(z)?;
        let p = g.constant(&Tensor::full([5, 4], 0.25));
        g.soft_cross_entropy(p, q)
    };
    let r = grad_check(
        |g, v| {
            let xv = g.constant(&x);
            net(g, xv, v)
        },
        &w1,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("composite w1", r);
    let r = grad_check(
        |g, v| {
            let w1v = g.constant(&w1);
            net(g, v, w1v)
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("composite x", r);
}

#[test]
fn structural_ops_gradients() {
    let x = uniform(&[2, 3, 4], 36);
    let r = grad_check(
        |g, v| {
            let p = g.permute(v, &[2, 0, 1])?;
            weighted_sum(g, p, 37)
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("permute", r);
    let r = grad_check(
        |g, v| {
            let n = g.narrow(v, 1, 1, 2)?;
            weighted_sum(g, n, 38)
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("narrow", r);
    let tok = uniform(&[1, 4], 39);
    let r = grad_check(
        |g, v| {
            let t = g.constant(&tok);
            let y = g.prepend_token(v, t)?;
            weighted_sum(g, y, 40)
        },
        &x,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("prepend x", r);
    let r = grad_check(
        |g, v| {
            let xv = g.constant(&x);
            let y = g.prepend_token(xv, v)?;
            weighted_sum(g, y, 40)
        },
        &tok,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("prepend token", r);
    let b = uniform(&[3, 4], 41);
    let r = grad_check(
        |g, v| {
            let xv = g.constant(&x);
            let y = g.add_broadcast(xv, v)?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        },
        &b,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("add_broadcast", r);
    let img = uniform(&[2, 2, 4, 4], 42);
    let r = grad_check(
        |g, v| {
            let p = g.patchify(v, 2)?;
            let s = g.scale(p, 0.5);
            let r = g.reshape(s, [2, 4 * 8])?;
            weighted_sum(g, r, 43)
        },
        &img,
        STEP,
        TOL,
    )
    .unwrap();
    assert_pass("patchify", r);
}

#[test]
fn patchify_layout() {
    // 1 image, 1 channel, 4x4 with values 0..16, patch 2.
    let data: Vec<f64> = (0..16).map(f64::from).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(&Tensor::from_f64([1, 1, 4, 4], &data).unwrap());
    let p = g.patchify(x, 2).unwrap();
    assert_eq!(g.shape(p), &[1, 4, 4]);
    assert_eq!(
        g.value(p),
        &[
            0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0, 8.0, 9.0, 12.0, 13.0, 10.0, 11.0, 14.0, 15.0
        ]
    );
}

#[test]
fn grad_check_linear_function_is_near_exact() {
    let x = uniform(&[6], 44);
    let r = grad_check(|g, v| weighted_sum(g, v, 45), &x, STEP, 1e-5).unwrap();
    assert!(r.passed);
    assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
}

#[test]
fn grad_check_flags_corrupted_gradient() {
    let x = uniform(&[4], 46);
    let value = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v).sum());
    let corrupted: Vec<f64> = x.data().iter().map(|v| 2.0 * v + 0.1).collect();
    let r = compare_gradients(value, &corrupted, &x, STEP, 1e-5).unwrap();
    assert!(!r.passed);
    let correct: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
    assert!(compare_gradients(value, &correct, &x, STEP, 1e-5).unwrap().passed);
}
