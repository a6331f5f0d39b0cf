mod common;

use common::{random_tensor, residual, Img};
use dsmr_core::checkpoint::Container;
use dsmr_core::data::NormStats;
use dsmr_core::model::{param_count, Model, ModelConfig, ParamRole};
use dsmr_core::rng::SplitMix64;
use dsmr_core::tensor::Tensor;
use dsmr_core::Error;

fn small(seed: u64) -> Model<f64> {
    let mut m: Model<f64> = Model::build(&ModelConfig::new(2, vec![3, 5, 4], seed)).unwrap();
    // Non-zero biases and varied slopes exercise every term of the oracle.
    let mut rng = SplitMix64::new(seed ^ 0xabc);
    let specs = m.specs().to_vec();
    for (s, p) in specs.iter().zip(m.params_mut()) {
        if matches!(s.role, ParamRole::Bias | ParamRole::Slope) {
            for v in p.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
    }
    m
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut rng = SplitMix64::new(1);
    for seed in 0..20 {
        let m = small(seed);
        let x = random_tensor(&mut rng, &[2, 1, 8, 12]);
        let (pred, res) = m.forward_residual(&x).unwrap();
        let expect = residual(&m, &Img::from_tensor(&x));
        let d = res
            .data()
            .iter()
            .zip(&expect.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-6, "seed {seed}: {d}");
        for ((p, xi), r) in pred.data().iter().zip(x.data()).zip(res.data()) {
            assert_eq!(*p, xi + r);
        }
    }
}

#[test]
fn f32_forward_tracks_f64() {
    let m = small(3);
    let x = random_tensor(&mut SplitMix64::new(2), &[1, 1, 16, 16]);
    let (_, r64) = m.forward_residual(&x).unwrap();
    let (_, r32) = m.cast::<f32>().forward_residual(&x.cast::<f32>()).unwrap();
    for (a, b) in r64.data().iter().zip(r32.data()) {
        assert!((a - *b as f64).abs() < 1e-4);
    }
}

#[test]
fn zero_head_is_bitwise_identity() {
    let mut m: Model<f32> = Model::build(&ModelConfig::new(3, vec![4, 8, 8, 8], 9)).unwrap();
    m.zero_head();
    let mut rng = SplitMix64::new(4);
    for _ in 0..10 {
        let x = Tensor::from_fn(&[2, 1, 16, 24], |_| (rng.normal() * 100.0) as f32);
        let (y, _) = m.forward_residual(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn residual_offset_is_linear_in_head_bias() {
    let mut m = small(5);
    let x = random_tensor(&mut SplitMix64::new(6), &[1, 1, 8, 8]);
    let mean = |m: &Model<f64>| {
        let (_, r) = m.forward_residual(&x).unwrap();
        r.data().iter().sum::<f64>() / r.len() as f64
    };
    m.param_mut("head.bias").unwrap().data_mut()[0] = 0.0;
    let base = mean(&m);
    for t in [1.0, -3.0, 250.0, 1e4] {
        m.param_mut("head.bias").unwrap().data_mut()[0] = t;
        assert!((mean(&m) - base - t).abs() < 1e-9 * t.abs().max(1.0));
    }
}

#[test]
fn any_multiple_of_the_pooling_factor_is_accepted() {
    let m: Model<f32> = Model::build(&ModelConfig::new(2, vec![2, 2, 2], 0)).unwrap();
    for (h, w) in [(4, 4), (8, 20), (32, 12)] {
        let (y, _) = m.forward_residual(&Tensor::zeros(&[1, 1, h, w])).unwrap();
        assert_eq!(y.shape(), &[1, 1, h, w]);
    }
    match m.forward_residual(&Tensor::zeros(&[1, 1, 6, 8])) {
        Err(Error::Dimension(msg)) => assert!(msg.contains("multiple of 4"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn build_is_deterministic_and_counted() {
    let cfg = ModelConfig::new(3, vec![4, 6, 8, 10], 42);
    let a: Model<f32> = Model::build(&cfg).unwrap();
    assert_eq!(a, Model::build(&cfg).unwrap());
    assert_eq!(a.num_params(), param_count(&cfg));
    let other: Model<f32> = Model::build(&ModelConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a, other);
}

#[test]
fn depth_two_count_by_hand() {
    // enc0 1->8: 128 + 8 + 8 slopes; enc1 8->16: 2048 + 16 + 16;
    // bottleneck 16->32: 8192 + 32 + 32; dec1 32->16: 8192 + 16;
    // dec0 16->8: 2048 + 8; head 8->1: 128 + 1.
    let cfg = ModelConfig::new(2, vec![8, 16, 32], 0);
    assert_eq!(param_count(&cfg), 144 + 2080 + 8256 + 8208 + 2056 + 129);
    let m: Model<f32> = Model::build(&cfg).unwrap();
    let names: Vec<&str> = m.specs().iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names.len(), 15);
    assert_eq!(&names[..3], &["enc0.weight", "enc0.bias", "enc0.slope"]);
    assert_eq!(&names[names.len() - 2..], &["head.weight", "head.bias"]);
    assert_eq!(m.param("dec1.weight").unwrap().shape(), &[16, 32, 4, 4]);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m: Model<f32> = Model::build(&ModelConfig::new(2, vec![3, 4, 5], 17)).unwrap();
    let norm = NormStats::new(2.5).unwrap();
    m.save(Some(&norm), &path).unwrap();
    let (back, n) = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    for (a, b) in back.params().iter().zip(m.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(n, Some(norm));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m: Model<f32> = Model::build(&ModelConfig::new(1, vec![2, 2], 1)).unwrap();
    let bytes = m.to_container(None).to_bytes();

    let p = dir.path().join("magic.ckpt");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(matches!(Model::<f32>::load(&p), Err(Error::Format { .. })));

    let p = dir.path().join("short.ckpt");
    std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Model::<f32>::load(&p), Err(Error::Payload { .. })));

    // A declared shape that disagrees with the config.
    let p = dir.path().join("shape.ckpt");
    let mut c = m.to_container(None);
    c.tensors[0].1 = Tensor::zeros(&[2, 1, 4, 3]);
    c.write(&p).unwrap();
    assert!(matches!(Model::<f32>::load(&p), Err(Error::Mismatch(_))));

    let p = dir.path().join("feat.ckpt");
    Container::new(b"DSMRFEAT").write(&p).unwrap();
    assert!(matches!(Model::<f32>::load(&p), Err(Error::Format { .. })));
}
