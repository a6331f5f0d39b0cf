use dsmr_core::config::DataConfig;
use dsmr_core::data::{NormStats, PatchSet, Raster};
use dsmr_core::engine::*;
use dsmr_core::loss::LossWeights;
use dsmr_core::model::{Model, ModelConfig};
use dsmr_core::pipeline::{prepare, Dataset};
use dsmr_core::rng::{derive_seed, SplitMix64};
use dsmr_core::synth::{degrade, generate_clean, SceneSpec};
use dsmr_core::tensor::Tensor;
use dsmr_core::Error;

fn dataset(identity: bool) -> Dataset {
    let pairs: Vec<(Raster, Raster)> = (0..2)
        .map(|i| {
            let s = SceneSpec {
                seed: derive_seed(21, i),
                width: 96,
                height: 96,
                building_count: 2,
                building_size: (3.0, 6.0),
                ..SceneSpec::default()
            };
            let clean = generate_clean(&s).unwrap();
            let input = if identity {
                clean.clone()
            } else {
                degrade(&clean, &s).unwrap()
            };
            (input, clean)
        })
        .collect();
    let cfg = DataConfig {
        patch_size: 16,
        val_frac: 0.2,
        test_frac: 0.2,
        train_patches: 24,
        ..DataConfig::default()
    };
    prepare(&pairs, &cfg, 4).unwrap()
}

fn tiny(seed: u64) -> Model<f32> {
    Model::build(&ModelConfig::new(2, vec![4, 8, 8], seed)).unwrap()
}

fn train_cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        steps,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        seed: 3,
        weights: LossWeights {
            lambda_weights: 1e-4,
            lambda_activity: 1e-4,
            ..LossWeights::img_only()
        },
        val_every: 5,
        augment: true,
    }
}

/// Textbook bias-corrected Adam on plain `f64` values.
fn adam_reference(p: &mut [f64], grads: &[Vec<f64>], cfg: &AdamConfig) {
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    for (t, g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[test]
fn adam_matches_hand_computation() {
    let cfg = AdamConfig {
        lr: 0.01,
        ..AdamConfig::default()
    };
    let grads = vec![vec![0.5, -1.0, 0.0], vec![0.1, 0.3, 0.0], vec![-0.2, 0.0, 2.0]];
    let mut params = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
    let mut state = AdamState::new(&params);
    for (t, g) in grads.iter().enumerate() {
        step_adam(&mut params, &[g.as_slice()], &mut state, &cfg).unwrap();
        if t == 0 {
            // First step moves by lr * g / (|g| + eps).
            let d = params[0].data();
            assert!((d[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
            assert!((d[1] - (-2.0 + 0.01 * 1.0 / (1.0 + 1e-8))).abs() < 1e-15);
            assert_eq!(d[2], 0.5);
        }
    }
    let mut expect = vec![1.0, -2.0, 0.5];
    adam_reference(&mut expect, &grads, &cfg);
    for (a, b) in params[0].data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn adam_update_is_sign_equivariant() {
    let cfg = AdamConfig {
        lr: 0.003,
        ..AdamConfig::default()
    };
    let mut rng = SplitMix64::new(8);
    let grads: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.normal()).collect()).collect();
    let start = Tensor::new(vec![6], vec![0.0f64; 6]).unwrap();
    let run = |sign: f64| {
        let mut p = vec![start.clone()];
        let mut s = AdamState::new(&p);
        for g in &grads {
            let g: Vec<f64> = g.iter().map(|v| sign * v).collect();
            step_adam(&mut p, &[g.as_slice()], &mut s, &cfg).unwrap();
        }
        p.remove(0)
    };
    let (pos, neg) = (run(1.0), run(-1.0));
    for (a, b) in pos.data().iter().zip(neg.data()) {
        assert_eq!(*a, -*b);
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let ds = dataset(false);
    let model = tiny(1);
    let out = train(model.clone(), &ds.train, Some(&ds.val), &train_cfg(6, 0.0), None).unwrap();
    for (a, b) in out.model.params().iter().zip(model.params()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_is_reproducible() {
    let ds = dataset(false);
    let cfg = train_cfg(12, 1e-3);
    let a = train(tiny(2), &ds.train, Some(&ds.val), &cfg, None).unwrap();
    let b = train(tiny(2), &ds.train, Some(&ds.val), &cfg, None).unwrap();
    assert_eq!(a.history_tsv(), b.history_tsv());
    for (x, y) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(a.best_step, b.best_step);
    assert!(a.history.iter().filter(|r| r.val_l1.is_some()).count() >= 2);
    assert_eq!(a.history.len(), 12);
}

#[test]
fn divergence_aborts_with_non_finite() {
    let ds = dataset(false);
    let err = train(tiny(3), &ds.train, None, &train_cfg(20, 1e30), None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn unnormalised_training_set_is_rejected() {
    let ds = dataset(false);
    let mut raw: PatchSet = ds.train.clone();
    raw.normalized = false;
    assert!(train(tiny(1), &raw, None, &train_cfg(1, 1e-3), None).is_err());
}

#[test]
fn identity_model_on_identity_data_is_perfect() {
    let ds = dataset(true);
    let mut m = tiny(5);
    m.zero_head();
    let r = evaluate(&m, &ds.test, &ds.stats).unwrap();
    assert_eq!(r.model.acc, 1.0);
    assert_eq!(r.model.mae, 0.0);
    assert_eq!(r.model.medae, 0.0);
    assert_eq!(r.model, r.baseline);
}

#[test]
fn identity_model_matches_baseline_on_degraded_data() {
    let ds = dataset(false);
    let mut m = tiny(5);
    m.zero_head();
    let r = evaluate(&m, &ds.test, &ds.stats).unwrap();
    assert_eq!(r.model, r.baseline);
    assert!(r.baseline.mae > 0.0);
}

#[test]
fn metrics_ignore_order_and_grow_with_threshold() {
    let mut rng = SplitMix64::new(2);
    let mut errs: Vec<f64> = (0..501).map(|_| rng.normal().abs()).collect();
    let a = metrics_from_errors(&errs, 0.5).unwrap();
    rng.shuffle(&mut errs);
    assert_eq!(a, metrics_from_errors(&errs, 0.5).unwrap());
    let mut last = 0.0;
    for k in 0..40 {
        let acc = metrics_from_errors(&errs, k as f64 * 0.1).unwrap().acc;
        assert!(acc >= last);
        last = acc;
    }
    assert_eq!(last, 1.0);
}

fn terrain(w: usize, h: usize, seed: u64) -> Raster {
    let s = SceneSpec {
        seed,
        width: w,
        height: h,
        building_count: 1 + w * h / 40_000,
        building_size: (3.0, 6.0),
        ..SceneSpec::default()
    };
    let clean = generate_clean(&s).unwrap();
    degrade(&clean, &s).unwrap()
}

fn random_model(seed: u64) -> Model<f32> {
    let mut m = tiny(seed);
    let mut rng = SplitMix64::new(seed);
    for v in m.param_mut("head.weight").unwrap().data_mut() {
        *v = 0.1 * rng.normal() as f32;
    }
    m
}

#[test]
fn zero_head_inference_reproduces_filled_input() {
    let r = terrain(120, 90, 1);
    let mut m = tiny(1);
    m.zero_head();
    let stats = NormStats::new(3.0).unwrap();
    let out = infer_tiled(&m, &r, &stats, 32, 8).unwrap();
    let filled = dsmr_core::data::fill_holes(&r).unwrap();
    assert_eq!(out.heights(), filled.heights());
}

#[test]
fn zero_overlap_tiles_paste_exactly() {
    let mut r = terrain(96, 64, 2);
    r = dsmr_core::data::fill_holes(&r).unwrap();
    let m = random_model(4);
    let stats = NormStats::new(2.5).unwrap();
    let rep = infer_tiled_report(&m, &r, &stats, 32, 0).unwrap();
    for &(r0, c0) in &rep.layout.tiles() {
        let window: Vec<f32> = (r0..r0 + 32)
            .flat_map(|i| (c0..c0 + 32).map(move |j| (i, j)))
            .map(|(i, j)| r.get(i, j).unwrap())
            .collect();
        let expect = refine_tile(&m, &window, 32, 32, &stats).unwrap();
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(
                    rep.raster.get(r0 + i, c0 + j).unwrap().to_bits(),
                    expect[i * 32 + j].to_bits()
                );
            }
        }
    }
    assert_eq!(rep.seam, 0.0);
}

#[test]
fn tiled_output_keeps_shape_and_is_repeatable() {
    let r = terrain(1000, 700, 3);
    let m = random_model(6);
    let stats = NormStats::new(3.0).unwrap();
    let a = infer_tiled_report(&m, &r, &stats, 256, 32).unwrap();
    let b = infer_tiled(&m, &r, &stats, 256, 32).unwrap();
    assert_eq!((a.raster.width(), a.raster.height()), (1000, 700));
    assert_eq!(a.raster, b);
    assert!(a.raster.is_complete());
    assert!(a.seam.is_finite());
}

#[test]
fn small_raster_is_padded_and_cropped() {
    let r = terrain(30, 50, 4);
    let m = random_model(7);
    let out = infer_tiled(&m, &r, &NormStats::new(1.0).unwrap(), 512, 64).unwrap();
    assert_eq!((out.width(), out.height()), (30, 50));
    assert!(out.heights().iter().all(|v| v.is_finite()));
}

#[test]
fn report_files_are_written() {
    let ds = dataset(false);
    let r = evaluate(&tiny(1), &ds.test, &ds.stats).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("metrics");
    r.write(&stem).unwrap();
    let kv = std::fs::read_to_string(stem.with_extension("kv")).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("mae=")));
    assert!(kv.contains("baseline.mae="));
    assert!(r.summary().contains("MAE"));
}

#[test]
fn observer_can_stop_early() {
    let ds = dataset(false);
    let out = train_with(tiny(2), &ds.train, None, &train_cfg(50, 1e-3), None, |p| {
        Ok(match p {
            Progress::Step(r) if r.step == 7 => Flow::Stop,
            _ => Flow::Continue,
        })
    })
    .unwrap();
    assert_eq!(out.history.len(), 7);
    assert_eq!(out.best_step, 7);
}
