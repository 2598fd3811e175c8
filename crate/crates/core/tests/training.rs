use lga_core::data::{synth_dataset, Batch, LabelMode, SynthSpec};
use lga_core::gradcheck::miniature_config;
use lga_core::model::{Model, ModelConfig};
use lga_core::nn::ParamStore;
use lga_core::train::{
    cosine_lr, evaluate, stop_epoch, train, train_step, AdamW, AdamWConfig, ClassMetrics, EarlyStopping, MetricsReport, ScheduleSpec,
    StopDecision, TrainSpec,
};
use lga_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ── optimiser ───────────────────────────────────────────────────────────────

/// Scalar AdamW with decoupled decay, written out longhand.
fn adamw_scalar(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        p -= lr * wd * p;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

#[test]
fn adamw_matches_scalar_oracle_over_ten_steps() {
    let grads: Vec<Vec<f64>> = (0..10).map(|t| vec![(t as f64).sin() + 0.3, -0.05 * t as f64, 2.0]).collect();
    let init = [0.7, -1.3, 0.0];
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64(&[3], &init).unwrap());
    let cfg = AdamWConfig {
        weight_decay: 0.05,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    for g in &grads {
        let gt = Tensor::from_f64(&[3], g).unwrap();
        opt.step(&mut store, &[Some(&gt)], 0.01).unwrap();
    }
    for j in 0..3 {
        let series: Vec<f64> = grads.iter().map(|g| g[j]).collect();
        let expect = adamw_scalar(init[j], &series, 0.01, 0.05);
        assert!((store.tensors()[0].data()[j] - expect).abs() <= 1e-10);
    }
}

#[test]
fn zero_gradient_only_decays() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    for _ in 0..5 {
        opt.step(&mut store, &[None], 0.1).unwrap();
    }
    let f = (1.0f64 - 0.1 * 0.01).powi(5);
    assert!((store.tensors()[0].data()[0] - f).abs() < 1e-15);
    assert!((store.tensors()[0].data()[1] + 2.0 * f).abs() < 1e-15);

    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    let before = store.clone();
    opt.step(&mut store, &[None], 0.1).unwrap();
    assert_eq!(store, before);
}

// ── schedule and stopping ──────────────────────────────────────────────────

#[test]
fn cosine_endpoints_are_exact() {
    let s = ScheduleSpec::default();
    assert_eq!(cosine_lr(0, &s), 1e-4);
    assert_eq!(cosine_lr(49, &s), 1e-5);
    let odd = ScheduleSpec {
        total_epochs: 11,
        ..s
    };
    assert!((cosine_lr(5, &odd) - 5.5e-5).abs() < 1e-18);
}

proptest! {
    #[test]
    fn cosine_is_monotone_and_bounded(total in 2usize..200, lo in 1e-6f64..1e-3, span in 1.0f64..100.0) {
        let s = ScheduleSpec { lr_start: lo * span, lr_end: lo, total_epochs: total };
        let mut prev = f64::INFINITY;
        for e in 0..total {
            let lr = cosine_lr(e, &s);
            prop_assert!(lr <= prev && lr >= s.lr_end && lr <= s.lr_start);
            prev = lr;
        }
    }

    #[test]
    fn f1_is_harmonic_mean(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let m = ClassMetrics::from_counts("x".into(), tp, fp, fn_, tn);
        let (p, r) = (m.precision, m.recall);
        if p + r > 0.0 {
            prop_assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }
}

#[test]
fn early_stopping_follows_a_scripted_history() {
    // improvements at 0, 1, 3; ties never count
    let history = [1.0, 0.8, 0.8, 0.7, 0.75, 0.7, 0.9, 0.71, 0.72, 0.73, 0.7, 0.6];
    let mut es = EarlyStopping::new(7);
    let decisions: Vec<StopDecision> = history.iter().enumerate().map(|(e, &l)| es.update(e, l)).collect();
    assert_eq!(decisions[3], StopDecision::Improved);
    assert_eq!(decisions[2], StopDecision::Continue);
    assert_eq!(decisions[10], StopDecision::Stop);
    assert!(decisions[4..10].iter().all(|&d| d == StopDecision::Continue));
    assert_eq!(stop_epoch(&history, 7), Some(10));
    assert_eq!(stop_epoch(&[3.0, 2.0, 1.0], 1), None);
    assert_eq!(stop_epoch(&[1.0; 9], 7), Some(7));
}

// ── metrics ────────────────────────────────────────────────────────────────

#[test]
fn metrics_match_brute_force_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, k) = (1000, 6);
    let preds: Vec<u8> = (0..n * k).map(|_| rng.random_bool(0.4) as u8).collect();
    let labels: Vec<u8> = (0..n * k).map(|_| rng.random_bool(0.3) as u8).collect();
    let report = MetricsReport::from_binary(&preds, &labels, k, 0.5).unwrap();
    let mut f1_sum = 0.0;
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for r in 0..n {
            match (preds[r * k + c], labels[r * k + c]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => tn += 1,
            }
        }
        let m = &report.classes[c];
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
        let p = tp as f64 / (tp + fp) as f64;
        let rc = tp as f64 / (tp + fn_) as f64;
        assert!((m.f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
        assert!((m.accuracy - (tp + tn) as f64 / n as f64).abs() < 1e-12);
        f1_sum += m.f1;
    }
    assert!((report.macro_avg.f1 - f1_sum / k as f64).abs() < 1e-12);
    assert_eq!(report.records, n);
}

#[test]
fn empty_classes_score_zero_not_nan() {
    let report = MetricsReport::from_binary(&[0, 0, 0, 0], &[0, 0, 0, 0], 2, 0.5).unwrap();
    for c in &report.classes {
        assert_eq!((c.precision, c.recall, c.f1, c.accuracy), (0.0, 0.0, 0.0, 1.0));
    }
    let json = serde_json::to_value(&report).unwrap();
    assert!(json["classes"][0].get("fn").is_some());
    assert!(json.get("macro").is_some());
}

#[test]
fn logits_threshold_at_sigmoid() {
    let r = MetricsReport::from_logits(&[0.0, -0.01], &[1, 1], 1, 0.5).unwrap();
    assert_eq!((r.classes[0].tp, r.classes[0].fn_), (1, 1));
}

// ── end-to-end optimisation ─────────────────────────────────────────────────

fn tiny_model_config() -> ModelConfig {
    miniature_config()
}

#[test]
fn eight_records_can_be_memorised() {
    let cfg = tiny_model_config();
    let mut spec = SynthSpec::new(8, cfg.classes, 3, cfg.leads, cfg.input_len);
    spec.labels = LabelMode::MultiHot { prevalence: 0.4 };
    let ds = synth_dataset(&spec).unwrap();
    let (model, mut store) = Model::init::<f64>(&cfg, 3).unwrap();
    let opt_cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, &store);
    let batch = Batch::<f64>::gather(&ds, &(0..8).collect::<Vec<_>>());
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(train_step(&model, &mut store, &mut opt, &batch, 1e-2).unwrap());
        if *losses.last().unwrap() < 0.01 {
            break;
        }
    }
    assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());

    // small steps decrease the loss monotonically at the start
    let (model, mut store) = Model::init::<f64>(&cfg, 4).unwrap();
    let mut opt = AdamW::new(opt_cfg, &store);
    let first: Vec<f64> = (0..10).map(|_| train_step(&model, &mut store, &mut opt, &batch, 1e-3).unwrap()).collect();
    assert!(first.windows(2).all(|w| w[1] < w[0]), "{first:?}");
}

fn short_run(seed: u64) -> (Vec<lga_core::train::EpochLog>, ParamStore<f64>, f64) {
    let cfg = tiny_model_config();
    let ds = synth_dataset(&SynthSpec::new(48, cfg.classes, 1, cfg.leads, cfg.input_len)).unwrap();
    let (tr, va) = (ds.with_records(ds.records[..36].to_vec()), ds.with_records(ds.records[36..].to_vec()));
    let (model, mut store) = Model::init::<f64>(&cfg, seed).unwrap();
    let mut spec = TrainSpec::default();
    spec.schedule = ScheduleSpec {
        lr_start: 3e-3,
        lr_end: 1e-4,
        total_epochs: 6,
    };
    spec.batch_size = 8;
    spec.patience = 2;
    let out = train(&model, &mut store, &tr, &va, &spec, seed, |_| {}).unwrap();
    for (e, row) in out.log.iter().enumerate() {
        assert_eq!(row.epoch, e);
        assert_eq!(row.lr, cosine_lr(e, &spec.schedule));
    }
    // best weights are back in the store
    let restored = evaluate(&model, &store, &va, 0.5, 8).unwrap().loss.unwrap();
    assert_eq!(out.log[out.best_epoch].val_loss, restored);
    let min = out.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(restored, min);
    assert_eq!(out.stopped_early, out.log.len() < 6);
    (out.log, store, restored)
}

#[test]
fn training_is_seed_deterministic_and_restores_best() {
    let (log_a, store_a, _) = short_run(5);
    let (log_b, store_b, _) = short_run(5);
    assert_eq!(log_a, log_b);
    assert_eq!(store_a, store_b);
    let (log_c, _, _) = short_run(6);
    assert_ne!(log_a[0].train_loss, log_c[0].train_loss);
}
