use sws_core::data::{make_synthetic, split, Dataset};
use sws_core::diffcore::{Graph, Tensor};
use sws_core::sharing::{build_aux, custom_plan};
use sws_core::train::{
    cache_teacher_logits, evaluate, logit_stats, loss_cls, loss_distill, loss_total, opt_step, AdamState, Metrics,
    Schedule, TeacherSource, TrainConfig, TrainError,
};
use sws_core::vit::{build_model, ModelConfig, ModelParams};

fn cfg(depth: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        depth,
        width: 16,
        heads: 2,
        mlp_ratio: 2.0,
        classes,
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn distill_value(student: &[f64], teacher: &[f64], rows: usize, tau: f64, scaling: bool) -> f64 {
    let mut g = Graph::<f64>::new();
    let c = student.len() / rows;
    let s = g.constant(&Tensor::from_f64([rows, c], student).unwrap());
    let t = Tensor::from_f64([rows, c], teacher).unwrap();
    let l = loss_distill(&mut g, s, &t, tau, scaling).unwrap();
    g.item(l)
}

fn cls_value(logits: &[f64], labels: &[usize]) -> f64 {
    let mut g = Graph::<f64>::new();
    let s = g.constant(&Tensor::from_f64([labels.len(), logits.len() / labels.len()], logits).unwrap());
    let l = loss_cls(&mut g, s, labels).unwrap();
    g.item(l)
}

#[test]
fn distillation_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((distill_value(&[0.0, 0.0], &[0.0, 0.0], 1, 1.0, false) - ln2).abs() < 1e-15);

    let t = [0.3, -1.2, 2.0, 0.7];
    let p = softmax(&t);
    let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    assert!((distill_value(&t, &t, 1, 1.0, false) - entropy).abs() < 1e-6);

    let far = distill_value(&[5.0, -3.0, 1.0], &[-2.0, 4.0, 0.5], 1, 1e6, false);
    assert!((far - 3f64.ln()).abs() < 1e-5);

    let (pt, qs) = (softmax(&[2.0, 0.0]), softmax(&[0.0, 2.0]));
    let direct = -(pt[0] * qs[0].ln() + pt[1] * qs[1].ln());
    assert!((distill_value(&[0.0, 2.0], &[2.0, 0.0], 1, 1.0, false) - direct).abs() < 1e-14);

    // τ² scaling only multiplies.
    let plain = distill_value(&[0.0, 2.0], &[2.0, 0.0], 1, 3.0, false);
    let scaled = distill_value(&[0.0, 2.0], &[2.0, 0.0], 1, 3.0, true);
    assert!((scaled - 9.0 * plain).abs() < 1e-14);
}

#[test]
fn classification_examples_and_gradient() {
    assert!((cls_value(&[0.0, 0.0], &[1]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(cls_value(&[30.0, 0.0, 0.0], &[0]) < 1e-12);

    let logits = [0.5, -1.0, 2.0, 0.1, 0.0, -0.3];
    let labels = [2, 0];
    let mut g = Graph::<f64>::new();
    let s = g.param(&Tensor::from_f64([2, 3], &logits).unwrap());
    let l = loss_cls(&mut g, s, &labels).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(s).unwrap();
    for (r, &y) in labels.iter().enumerate() {
        let p = softmax(&logits[r * 3..r * 3 + 3]);
        for c in 0..3 {
            let want = (p[c] - f64::from(u8::from(c == y))) / 2.0;
            assert!((grad[r * 3 + c] - want).abs() < 1e-12);
        }
    }

    let mut g = Graph::<f64>::new();
    let s = g.constant(&Tensor::from_f64([1, 2], &[0.0, 0.0]).unwrap());
    assert!(matches!(loss_cls(&mut g, s, &[2]), Err(TrainError::Label { label: 2, classes: 2 })));
}

#[test]
fn total_loss_endpoints_and_midpoint() {
    let student = Tensor::from_f64([2, 3], &[0.2, -0.4, 1.1, 0.0, 0.9, -2.0]).unwrap();
    let teacher = Tensor::from_f64([2, 3], &[1.0, 0.0, -1.0, 0.3, 0.3, 0.8]).unwrap();
    let labels = [2, 1];
    let run = |alpha: f64| {
        let cfg = TrainConfig {
            alpha,
            tau: 1.5,
            ..TrainConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let s = g.constant(&student);
        let l = loss_total(&mut g, s, &labels, Some(&teacher), &cfg).unwrap();
        g.item(l)
    };
    let cls = cls_value(student.data(), &labels);
    let distill = distill_value(student.data(), teacher.data(), 2, 1.5, false);
    assert_eq!(run(0.0).to_bits(), cls.to_bits());
    assert_eq!(run(1.0).to_bits(), distill.to_bits());
    assert!((run(0.5) - 0.5 * (cls + distill)).abs() < 1e-7);
}

fn model64() -> ModelParams<f64> {
    build_model::<f64>(&cfg(1, 2), 3).unwrap()
}

#[test]
fn zero_gradient_applies_pure_decay() {
    let mut m = model64();
    let before = m.clone();
    let tc = TrainConfig {
        weight_decay: 0.05,
        ..TrainConfig::default()
    };
    m.named_tensors_mut().into_iter().for_each(|(_, t)| {
        let z = vec![0.0; t.numel()];
        t.accumulate_grad(&z).unwrap();
    });
    opt_step(&mut m, &mut AdamState::new(), &tc, 0.01).unwrap();
    for ((_, a), (_, b)) in m.named_tensors().into_iter().zip(before.named_tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), (y * (1.0 - 0.01 * 0.05)).to_bits());
        }
    }
}

#[test]
fn scalar_quadratic_matches_reference_adam() {
    let mut m = model64();
    let name = "head.bias";
    let set = |m: &mut ModelParams<f64>, x: f64| {
        for (n, t) in m.named_tensors_mut() {
            if n == name {
                t.data_mut()[0] = x;
            }
        }
    };
    let get = |m: &ModelParams<f64>| m.named_tensors().into_iter().find(|(n, _)| n == name).unwrap().1.data()[0];
    set(&mut m, 1.0);
    let tc = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut state = AdamState::new();
    let (mut x, mut mom, mut vel) = (1.0f64, 0.0f64, 0.0f64);
    for step in 1..=3 {
        m.zero_grad();
        for (n, t) in m.named_tensors_mut() {
            let mut g = vec![0.0; t.numel()];
            if n == name {
                g[0] = 2.0 * t.data()[0];
            }
            t.accumulate_grad(&g).unwrap();
        }
        opt_step(&mut m, &mut state, &tc, 0.1).unwrap();

        let g = 2.0 * x;
        mom = 0.9 * mom + 0.1 * g;
        vel = 0.999 * vel + 0.001 * g * g;
        let mhat = mom / (1.0 - 0.9f64.powi(step));
        let vhat = vel / (1.0 - 0.999f64.powi(step));
        x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((get(&m) - x).abs() < 1e-15, "step {step}: {} vs {x}", get(&m));
    }
}

#[test]
fn non_finite_gradient_aborts() {
    let mut m = model64();
    for (n, t) in m.named_tensors_mut() {
        if n == "cls_token" {
            let mut g = vec![0.0; t.numel()];
            g[0] = f64::NAN;
            t.accumulate_grad(&g).unwrap();
        }
    }
    let err = opt_step(&mut m, &mut AdamState::new(), &TrainConfig::default(), 0.1);
    assert!(matches!(err, Err(TrainError::NonFiniteGrad { ref name, step: 0 }) if name == "cls_token"));
}

#[test]
fn global_norm_is_reported_before_clipping() {
    let mut m = model64();
    m.named_tensors_mut().into_iter().for_each(|(_, t)| {
        let g = vec![3.0; t.numel()];
        t.accumulate_grad(&g).unwrap();
    });
    let mut a = m.clone();
    let tc = TrainConfig {
        grad_clip: Some(1.0),
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let norm = opt_step(&mut a, &mut AdamState::new(), &tc, 0.1).unwrap();
    let count: usize = m.named_tensors().iter().map(|(_, t)| t.numel()).sum();
    assert!((norm - 3.0 * (count as f64).sqrt()).abs() < 1e-9);
}

fn data(n: usize, classes: usize, seed: u64) -> (Dataset, Dataset) {
    let d = make_synthetic(n, classes, 8, seed).unwrap();
    split(&d, 0.75, seed).unwrap()
}

#[test]
fn tied_step_keeps_one_storage_per_stage() {
    let (train, val) = data(16, 3, 0);
    let plan = custom_plan(&[3, 1, 2]).unwrap();
    let mut aux = build_aux::<f32>(&cfg(6, 3), &plan, 1).unwrap();
    let before = aux.clone();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 12,
        alpha: 0.0,
        ..TrainConfig::default()
    };
    sws_core::train::train_model(&mut aux, &train, &val, &tc, None).unwrap();
    assert_eq!(aux.layers().len(), 3);
    assert_eq!(aux.layer_map(), before.layer_map());
    assert_eq!(aux.named_tensors().len(), 3 * 12 + 8);
    let changed = aux
        .layers()
        .iter()
        .zip(before.layers())
        .filter(|(a, b)| !a.bit_eq(b))
        .count();
    assert_eq!(changed, 3);
    assert!(!aux.shared.bit_eq(&before.shared));
}

#[test]
fn cached_and_live_teacher_give_identical_runs() {
    let (train, val) = data(40, 3, 2);
    assert_eq!(train.len(), 30);
    let teacher = build_model::<f32>(&cfg(2, 3), 9).unwrap();
    let frozen = teacher.clone();
    let cache = cache_teacher_logits(&teacher, &train, 8).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 15,
        alpha: 0.7,
        ..TrainConfig::default()
    };
    let start = build_model::<f32>(&cfg(2, 3), 4).unwrap();
    let (mut a, mut b) = (start.clone(), start);
    let ma = sws_core::train::train_model(&mut a, &train, &val, &tc, Some(TeacherSource::Cache(&cache))).unwrap();
    let mb = sws_core::train::train_model(&mut b, &train, &val, &tc, Some(TeacherSource::Live(&teacher))).unwrap();
    assert_eq!(ma.step_losses.len(), 2);
    assert_eq!(ma, mb);
    assert!(a.bit_eq(&b));
    assert!(teacher.bit_eq(&frozen));
}

#[test]
fn stale_cache_is_rejected_unless_unused() {
    let (train, val) = data(20, 2, 3);
    let (other, _) = data(20, 2, 4);
    let teacher = build_model::<f32>(&cfg(1, 2), 0).unwrap();
    let cache = cache_teacher_logits(&teacher, &other, 8).unwrap();
    let mut m = build_model::<f32>(&cfg(1, 2), 1).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let err = sws_core::train::train_model(&mut m, &train, &val, &tc, Some(TeacherSource::Cache(&cache)));
    assert!(matches!(err, Err(TrainError::StaleCache { .. })));
    let pure = TrainConfig { alpha: 0.0, ..tc.clone() };
    sws_core::train::train_model(&mut m, &train, &val, &pure, Some(TeacherSource::Cache(&cache))).unwrap();
    let err = sws_core::train::train_model(&mut m, &train, &val, &tc, None);
    assert!(matches!(err, Err(TrainError::Config(_))));
}

#[test]
fn zero_epochs_record_only_the_snapshot() {
    let (train, val) = data(20, 2, 5);
    let mut m = build_model::<f32>(&cfg(1, 2), 2).unwrap();
    let before = m.clone();
    let tc = TrainConfig {
        epochs: 0,
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let metrics = sws_core::train::train_model(&mut m, &train, &val, &tc, None).unwrap();
    assert_eq!(metrics.rows.len(), 1);
    assert_eq!(metrics.rows[0].epoch, 0);
    assert!(metrics.step_losses.is_empty());
    assert!(m.bit_eq(&before));
    assert_eq!(metrics.to_csv().lines().next(), Some(Metrics::CSV_HEADER));
}

#[test]
fn training_replays_bitwise() {
    let (train, val) = data(48, 4, 6);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 10,
        alpha: 0.0,
        seed: 77,
        schedule: Schedule::Cosine,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_model::<f32>(&cfg(2, 4), 8).unwrap();
        let metrics = sws_core::train::train_model(&mut m, &train, &val, &tc, None).unwrap();
        (m, metrics)
    };
    let (ma, a) = run();
    let (mb, b) = run();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.summary(), b.summary());
    assert!(ma.bit_eq(&mb));
    assert_eq!(a.rows.len(), 3);
}

#[test]
fn evaluation_is_chance_level_and_reproducible() {
    let d = make_synthetic(1000, 10, 8, 7).unwrap();
    let m = build_model::<f32>(&cfg(2, 10), 5).unwrap();
    let (loss, top1) = evaluate(&m, &d).unwrap();
    assert_eq!(evaluate(&m, &d).unwrap(), (loss, top1));
    let sigma = (0.1f64 * 0.9 / 1000.0).sqrt();
    assert!((top1 - 0.1).abs() <= 3.0 * sigma, "{top1}");

    let cache = cache_teacher_logits(&m, &d, 64).unwrap();
    let mut direct = 0.0;
    for (row, &y) in cache.logits().data().chunks(10).zip(d.labels()) {
        let p = softmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>());
        direct -= p[y].ln();
    }
    assert!((loss - direct / 1000.0).abs() < 1e-12);
    let (sum, _) = logit_stats(cache.logits().data(), 10, d.labels()).unwrap();
    assert!((sum / 1000.0 - loss).abs() < 1e-12);
}
