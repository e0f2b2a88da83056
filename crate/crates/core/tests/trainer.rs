mod common;

use std::fs;

use xald::autodiff::Graph;
use xald::data::{generate_dataset, write_dataset, Sample};
use xald::losses::{dice_loss, one_hot};
use xald::segnet::{Arch, SegModel};
use xald::trainer::{
    evaluate, run_training, train_iteration, train_on, train_step, Regularizer, TrainConfig, TrainReport, TrainState,
    CHECKPOINT_FILE, CURVES_FILE, REPORT_FILE,
};

fn small_config(regularizer: Regularizer, iters: usize) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        regularizer,
        batch_unlabeled: 2,
        arch: Arch { base_width: 4, ..Arch::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn supervised_loss_falls_on_a_tiny_set() {
    let ds = generate_dataset(16, 16, 4, 0, 1).unwrap();
    let labeled: Vec<&Sample> = ds.train.iter().collect();
    let cfg = TrainConfig { batch_labeled: 4, ..small_config(Regularizer::None, 100) };
    let mut state = TrainState::new(SegModel::init(cfg.arch, 0).unwrap(), 0);
    let losses: Vec<f64> = (0..100)
        .map(|_| train_iteration(&mut state, &cfg, &labeled, &[]).unwrap().sup_loss)
        .collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[95..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
}

#[test]
fn plain_sgd_step_moves_by_lr_times_the_gradient() {
    let ds = generate_dataset(16, 16, 4, 0, 2).unwrap();
    let batch: Vec<&Sample> = ds.train.iter().take(3).collect();
    let cfg = TrainConfig { momentum: 0.0, lr: 0.05, ..small_config(Regularizer::None, 10) };
    let model = SegModel::init(cfg.arch, 3).unwrap();

    // batch-mean gradient built as one graph
    let mut g = Graph::<f64>::new();
    let net = model.bind(&mut g, true).unwrap();
    let mut terms = Vec::new();
    for s in &batch {
        let x = g.constant(s.image.cast()).unwrap();
        let p = net.forward(&mut g, x).unwrap().probs;
        let t = g.constant(one_hot(&s.mask, 3, 16, 16).unwrap().cast()).unwrap();
        terms.push(dice_loss(&mut g, p, t, true).unwrap());
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    let mean = g.scale(total, 1.0 / terms.len() as f64).unwrap();
    let grads = g.backward(mean).unwrap();
    let mut state = TrainState::new(model.clone(), 0);
    train_step(&mut state, &cfg, &batch, &[]).unwrap();
    for (name, v) in net.vars() {
        let expected = cfg.lr * grads.get(v).unwrap().norm_l2();
        let step = state.model.param(name).unwrap().squared_distance(model.param(name).unwrap()).unwrap().sqrt();
        // f32 parameter storage rounds each update
        assert!((step - expected).abs() < 1e-3 * expected + 1e-7, "{name}: {step} vs {expected}");
    }
}

#[test]
fn zero_weight_regularizers_follow_the_unregularized_path() {
    let ds = generate_dataset(16, 16, 8, 2, 3).unwrap();
    let base = small_config(Regularizer::None, 6);
    let reference = train_on(&base, &ds).unwrap();
    for reg in [Regularizer::Vat, Regularizer::CrossAld, Regularizer::Ranmixup] {
        let cfg = TrainConfig { regularizer: reg, lambda_cross_max: 0.0, ..base.clone() };
        let out = train_on(&cfg, &ds).unwrap();
        assert_eq!(out.model, reference.model, "{reg}");
        assert!(out.curves.iter().all(|h| h.reg_loss == 0.0));
    }
}

#[test]
fn evaluation_of_a_background_model_matches_brute_force() {
    let ds = generate_dataset(16, 16, 4, 6, 4).unwrap();
    let model = SegModel::init(Arch::default(), 0).unwrap().with_zero_head();
    let report = evaluate(&model, &ds.eval).unwrap();
    let zeros = vec![0u8; 256];
    let expected: Vec<_> = ds
        .eval
        .iter()
        .map(|s| common::brute_force_metrics(&zeros, &s.mask, 16, 16, 3))
        .collect();
    let n = expected.len() as f64;
    let dice = expected.iter().map(|m| m.dice_pct).sum::<f64>() / n;
    let hd = expected.iter().map(|m| m.hd95_px).sum::<f64>() / n;
    assert!((report.dice_pct - dice).abs() < 1e-9, "{} vs {dice}", report.dice_pct);
    assert!((report.hd95_px - hd).abs() < 1e-9);
}

#[test]
fn training_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_dataset(&data, &generate_dataset(16, 16, 8, 2, 5).unwrap()).unwrap();
    let cfg = TrainConfig { eval_every: 2, ..small_config(Regularizer::CrossAld, 4) };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_training(&cfg, &data, &a).unwrap();
    run_training(&cfg, &data, &b).unwrap();
    for file in [CHECKPOINT_FILE, CURVES_FILE] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let read = |d: &std::path::Path| -> TrainReport {
        let mut r: TrainReport = serde_json::from_slice(&fs::read(d.join(REPORT_FILE)).unwrap()).unwrap();
        r.runtime_sec = 0.0;
        r
    };
    let ra = read(&a);
    assert_eq!(ra, read(&b));
    assert_eq!(ra.history.len(), 2);
    assert_eq!(ra.config.sampler.n_particles, 2);
    assert_eq!(ra.config.rampup_iters, Some(2));
    let curves = fs::read_to_string(a.join(CURVES_FILE)).unwrap();
    assert_eq!(curves.lines().count(), 5);
    assert!(curves.starts_with("iter,sup_loss,reg_loss,lambda,dice,jaccard,hd95,asd"));
}

#[test]
fn every_regularizer_trains_a_few_steps() {
    let ds = generate_dataset(16, 16, 8, 2, 6).unwrap();
    for reg in Regularizer::ALL {
        let out = train_on(&small_config(reg, 3), &ds).unwrap();
        assert_eq!(out.curves.len(), 3);
        let last = out.curves.last().unwrap();
        assert!(last.sup_loss.is_finite() && last.reg_loss.is_finite());
        if reg != Regularizer::None {
            assert!(out.curves.iter().any(|h| h.reg_loss > 0.0), "{reg}");
        }
    }
}

#[test]
fn mismatched_class_count_is_rejected() {
    let ds = generate_dataset(16, 16, 4, 2, 7).unwrap();
    let cfg = TrainConfig { arch: Arch { num_classes: 4, ..Arch::default() }, ..small_config(Regularizer::None, 2) };
    assert!(matches!(train_on(&cfg, &ds), Err(xald::Error::Mismatch(_))));
}
