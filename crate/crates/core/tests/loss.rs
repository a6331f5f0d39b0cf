mod common;

use common::{feature_loss, random_tensor, taps, Img};
use dsmr_core::loss::*;
use dsmr_core::model::{Model, ModelConfig};
use dsmr_core::rng::SplitMix64;
use dsmr_core::tensor::{Graph, Tensor};

fn extractor(seed: u64) -> FeatureExtractor<f64> {
    FeatureExtractor::random(ExtractorConfig::vgg16_scaled(32), seed).unwrap()
}

#[test]
fn feature_loss_matches_straight_line_oracle() {
    let mut rng = SplitMix64::new(21);
    for trial in 0..40 {
        let ex = extractor(trial);
        let pred = random_tensor(&mut rng, &[1, 1, 16, 16]);
        let target = random_tensor(&mut rng, &[1, 1, 16, 16]);
        let li: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let mut g = Graph::new();
        let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
        let l = loss_feat(&mut g, p, t, &ex, 0.7, &li).unwrap();
        let expect = feature_loss(&ex, &Img::from_tensor(&pred), &Img::from_tensor(&target), 0.7, &li);
        let got = g.value(l).item();
        assert!(
            (got - expect).abs() <= 1e-9 * expect.abs().max(1.0),
            "{got} vs {expect}"
        );
    }
}

#[test]
fn tap_counts_follow_the_layout() {
    let ex: FeatureExtractor<f64> = FeatureExtractor::random(ExtractorConfig::vgg16_scaled(16), 7).unwrap();
    let shapes = ex.config().tap_shapes(256, 256);
    let expected = [(4, 256, 256), (8, 128, 128), (16, 64, 64), (32, 32, 32), (32, 16, 16)];
    assert_eq!(shapes, expected);
    let full = ExtractorConfig::vgg16().tap_shapes(256, 256);
    let counts: Vec<usize> = full.iter().map(|(c, h, w)| c * h * w).collect();
    assert_eq!(counts, vec![4_194_304, 2_097_152, 1_048_576, 524_288, 131_072]);
    let x = random_tensor(&mut SplitMix64::new(1), &[1, 1, 32, 32]);
    let oracle = taps(&ex, &Img::from_tensor(&x));
    for (t, o) in ex.tap_values(&x).unwrap().iter().zip(&oracle) {
        assert_eq!(t.shape(), &[1, o.c, o.h, o.w]);
    }
}

#[test]
fn extractor_round_trip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vgg.feat");
    let ex = random_extractor(7);
    ex.save(&p).unwrap();
    let back = load_extractor(&p).unwrap();
    let x = Tensor::from_fn(&[1, 1, 32, 32], |i| (i % 7) as f32);
    assert_eq!(ex.tap_values(&x).unwrap(), back.tap_values(&x).unwrap());
    assert_eq!(random_extractor(7).tap_values(&x).unwrap(), ex.tap_values(&x).unwrap());
}

struct Setup {
    model: Model<f64>,
    ex: FeatureExtractor<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

fn setup(seed: u64) -> Setup {
    let mut rng = SplitMix64::new(seed);
    Setup {
        model: Model::build(&ModelConfig::new(2, vec![3, 4, 4], seed)).unwrap(),
        ex: extractor(seed + 1),
        x: random_tensor(&mut rng, &[2, 1, 16, 16]),
        y: random_tensor(&mut rng, &[2, 1, 16, 16]),
    }
}

fn total(s: &Setup, w: &LossWeights) -> LossValues {
    let mut g = Graph::new();
    let vars = s.model.attach(&mut g, true);
    let x = g.constant(s.x.clone());
    let y = g.constant(s.y.clone());
    let out = s.model.forward(&mut g, &vars, x).unwrap();
    let terms = loss_total(&mut g, out.prediction, y, out.residual, &s.model, &vars, w, Some(&s.ex)).unwrap();
    terms.values(&g)
}

#[test]
fn total_is_the_sum_of_independent_terms() {
    for seed in 0..5 {
        let s = setup(seed);
        let w = LossWeights {
            lambda_img: 1.3,
            lambda_weights: 0.01,
            lambda_activity: 0.002,
            lambda_feat: 0.5,
            lambda_feat_i: vec![1.0, 0.5, 0.25, 2.0, 1.0],
        };
        let v = total(&s, &w);

        let (pred, res) = s.model.forward_residual(&s.x).unwrap();
        let n = pred.len() as f64;
        let img = w.lambda_img / n
            * pred
                .data()
                .iter()
                .zip(s.y.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        let kernels: f64 = s
            .model
            .specs()
            .iter()
            .zip(s.model.params())
            .filter(|(sp, _)| sp.name.ends_with(".weight"))
            .map(|(_, t)| t.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let act = w.lambda_activity * res.data().iter().map(|v| v.abs()).sum::<f64>();
        let feat = feature_loss(
            &s.ex,
            &Img::from_tensor(&pred),
            &Img::from_tensor(&s.y),
            w.lambda_feat,
            &w.lambda_feat_i,
        );
        let expect = img + w.lambda_weights * kernels + act + feat;
        assert!((v.img - img).abs() < 1e-12);
        assert!((v.weights - w.lambda_weights * kernels).abs() < 1e-12);
        assert!((v.activity - act).abs() < 1e-12);
        assert!((v.feat - feat).abs() < 1e-9);
        assert!((v.total - expect).abs() < 1e-9);
    }
}

#[test]
fn total_is_affine_in_each_lambda() {
    let s = setup(9);
    let base = LossWeights {
        lambda_img: 1.0,
        lambda_weights: 1e-3,
        lambda_activity: 1e-3,
        lambda_feat: 1.0,
        lambda_feat_i: vec![1.0; 5],
    };
    let v0 = total(&s, &base);
    let set = |w: &mut LossWeights, k: usize, x: f64| match k {
        0 => w.lambda_img = x,
        1 => w.lambda_weights = x,
        2 => w.lambda_activity = x,
        _ => w.lambda_feat = x,
    };
    let terms = |v: &LossValues| [v.img, v.weights, v.activity, v.feat];
    for k in 0..4 {
        let mut w = base.clone();
        let old = [
            base.lambda_img,
            base.lambda_weights,
            base.lambda_activity,
            base.lambda_feat,
        ][k];
        set(&mut w, k, 3.0 * old);
        let v = total(&s, &w);
        for (j, (a, b)) in terms(&v).iter().zip(terms(&v0)).enumerate() {
            let expect = if j == k { 3.0 * b } else { b };
            assert!(
                (a - expect).abs() <= 1e-12 * expect.abs().max(1.0),
                "term {j} under lambda {k}"
            );
        }
    }
}

#[test]
fn img_only_reduces_to_l1_and_extractor_is_untouched() {
    let s = setup(4);
    let before = s.ex.checksum();
    let v = total(&s, &LossWeights::img_only());
    assert_eq!(v.total, v.img);
    assert_eq!((v.weights, v.activity, v.feat), (0.0, 0.0, 0.0));

    // Gradients reach the prediction through the extractor but not its weights.
    let mut g = Graph::new();
    let p = g.variable(s.x.clone());
    let t = g.constant(s.y.clone());
    let l = loss_feat(&mut g, p, t, &s.ex, 1.0, &[1.0; 5]).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(p).unwrap().iter().any(|v| *v != 0.0));
    assert_eq!(s.ex.checksum(), before);
}

#[test]
fn identical_inputs_give_zero_feature_loss() {
    let s = setup(2);
    let mut g = Graph::new();
    let p = g.constant(s.x.clone());
    let t = g.constant(s.x.clone());
    let same = loss_feat(&mut g, p, t, &s.ex, 1.0, &[1.0; 5]).unwrap();
    assert_eq!(g.value(same).item(), 0.0);
    let q = g.constant(s.y.clone());
    let off = loss_feat(&mut g, p, q, &s.ex, 1.0, &[0.0; 5]).unwrap();
    assert_eq!(g.value(off).item(), 0.0);
}
