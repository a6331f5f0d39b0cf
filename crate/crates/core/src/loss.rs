//! Composite training loss: pixel-wise L1, L1 kernel regularisation, L1
//! residual (activity) regularisation and a perceptual term comparing
//! activations of a fixed VGG16-layout feature extractor.
//!
//! ```text
//! total = λ_img / N_img · ‖ŷ − y‖₁
//!       + λ_weights · ‖w‖₁
//!       + λ_activity · ‖a‖₁
//!       + λ_feat · Σ_i λ_feat,i / N_i · ‖φ_i(ŷ) − φ_i(y)‖₁
//! ```
//!
//! `w` are the network's convolution kernels (biases and PReLU slopes are not
//! penalised), `a` is the residual produced by the decoder head, and `N_i` is
//! the number of activations at extractor tap `i`.

use std::path::Path;

use crate::checkpoint::{self, Container, EXTRACTOR_MAGIC};
use crate::error::{Error, Result};
use crate::model::{Model, ParamVars};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_img: f64,
    pub lambda_weights: f64,
    pub lambda_activity: f64,
    pub lambda_feat: f64,
    /// One weight per extractor tap.
    pub lambda_feat_i: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_img: 1.0,
            lambda_weights: 1e-6,
            lambda_activity: 1e-5,
            lambda_feat: 0.0,
            lambda_feat_i: vec![1.0; 5],
        }
    }
}

impl LossWeights {
    /// Only the pixel term, with weight 1.
    pub fn img_only() -> Self {
        Self {
            lambda_img: 1.0,
            lambda_weights: 0.0,
            lambda_activity: 0.0,
            lambda_feat: 0.0,
            lambda_feat_i: vec![1.0; 5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_img,
            self.lambda_weights,
            self.lambda_activity,
            self.lambda_feat,
        ];
        if all
            .iter()
            .chain(&self.lambda_feat_i)
            .any(|&l| !(l.is_finite() && l >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Position of a tap: the ReLU after convolution `layer` of `block`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tap {
    pub block: usize,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    /// Output widths of the 3x3 convolutions, grouped by pooling block.
    pub blocks: Vec<Vec<usize>>,
    pub taps: Vec<Tap>,
    pub in_channels: usize,
    pub kernel: usize,
    /// Copy a one-channel height map into every input channel.
    pub replicate_channels: bool,
}

impl ExtractorConfig {
    /// VGG16 convolution stack with taps at the last ReLU of each block.
    pub fn vgg16() -> Self {
        Self::vgg16_scaled(1)
    }

    /// VGG16 layout with every width divided by `divisor` (at least 1).
    pub fn vgg16_scaled(divisor: usize) -> Self {
        let d = |c: usize| (c / divisor.max(1)).max(1);
        let blocks = vec![
            vec![d(64), d(64)],
            vec![d(128), d(128)],
            vec![d(256), d(256), d(256)],
            vec![d(512), d(512), d(512)],
            vec![d(512), d(512), d(512)],
        ];
        let taps = blocks
            .iter()
            .enumerate()
            .map(|(b, layers)| Tap {
                block: b,
                layer: layers.len() - 1,
            })
            .collect();
        Self {
            blocks,
            taps,
            in_channels: 3,
            kernel: 3,
            replicate_channels: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("feature extractor needs at least one tap".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "extractor taps must be distinct and ordered by depth".into(),
            ));
        }
        for t in &self.taps {
            if self.blocks.get(t.block).is_none_or(|b| t.layer >= b.len()) {
                return Err(Error::Config(format!("tap {t:?} is outside the extractor")));
            }
        }
        if self.kernel == 0 || self.in_channels == 0 || self.blocks.iter().flatten().any(|&c| c == 0) {
            return Err(Error::Config("extractor widths and kernel must be positive".into()));
        }
        Ok(())
    }

    fn last_tap(&self) -> Tap {
        *self.taps.last().expect("validated")
    }

    /// Inputs must be a multiple of this in both dimensions.
    pub fn size_multiple(&self) -> usize {
        1 << self.last_tap().block
    }

    /// `(channels, height, width)` at each tap for an `h x w` input.
    pub fn tap_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        self.taps
            .iter()
            .map(|t| {
                let s = 1 << t.block;
                (self.blocks[t.block][t.layer], h / s, w / s)
            })
            .collect()
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let last = self.last_tap();
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (b, layers) in self.blocks.iter().enumerate().take(last.block + 1) {
            for (l, &cout) in layers.iter().enumerate() {
                if b == last.block && l > last.layer {
                    break;
                }
                out.push((
                    format!("block{b}.conv{l}.weight"),
                    vec![cout, cin, self.kernel, self.kernel],
                ));
                out.push((format!("block{b}.conv{l}.bias"), vec![cout]));
                cin = cout;
            }
        }
        out
    }
}

/// Fixed convolutional feature extractor. Its parameters enter the graph as
/// constants: gradients pass through to the input but never reach them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor<T> {
    config: ExtractorConfig,
    params: Vec<(String, Tensor<T>)>,
}

/// Full-width VGG16 layout with seeded random weights.
pub fn random_extractor(seed: u64) -> FeatureExtractor<f32> {
    FeatureExtractor::random(ExtractorConfig::vgg16(), seed).expect("vgg16 layout is valid")
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor<f32>> {
    FeatureExtractor::load(path)
}

impl<T: Real> FeatureExtractor<T> {
    /// He-normal kernels, zero biases, deterministic per seed.
    pub fn random(config: ExtractorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let t = if shape.len() == 4 {
                    let std = (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
                    let mut rng = SplitMix64::new(derive_seed(seed, i as u64));
                    Tensor::from_fn(&shape, |_| T::from_f64(std * rng.normal()))
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_params(config: ExtractorConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(&params)
                .any(|((n, s), (pn, pt))| n != pn || s.as_slice() != pt.shape())
        {
            return Err(Error::Mismatch(
                "extractor tensors do not match the declared layout".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn cast<U: Real>(&self) -> FeatureExtractor<U> {
        FeatureExtractor {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Records the extractor on `g` and returns one variable per tap.
    pub fn features(&self, g: &mut Graph<T>, input: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(input).dims4()?;
        let m = self.config.size_multiple();
        if h < m || w < m || h % m != 0 || w % m != 0 {
            return Err(Error::Dimension(format!(
                "feature extractor needs inputs that are multiples of {m}, got {h}x{w}"
            )));
        }
        let mut x = if c == self.config.in_channels {
            input
        } else if c == 1 && self.config.replicate_channels {
            g.repeat_channels(input, self.config.in_channels)?
        } else {
            return Err(Error::Dimension(format!(
                "feature extractor expects {} channels, got {c}",
                self.config.in_channels
            )));
        };
        let last = self.config.last_tap();
        let mut taps = Vec::with_capacity(self.config.taps.len());
        let mut p = self.params.iter();
        for (b, layers) in self.config.blocks.iter().enumerate().take(last.block + 1) {
            if b > 0 {
                x = g.maxpool2(x)?;
            }
            for l in 0..layers.len() {
                if b == last.block && l > last.layer {
                    break;
                }
                let (_, wt) = p.next().expect("layout checked");
                let (_, bs) = p.next().expect("layout checked");
                let wv = g.constant(wt.clone());
                let bv = g.constant(bs.clone());
                let y = g.conv2d(x, wv, bv)?;
                x = g.relu(y)?;
                if self.config.taps.contains(&Tap { block: b, layer: l }) {
                    taps.push(x);
                }
            }
        }
        Ok(taps)
    }

    /// Tap activations for a standalone input, without gradients.
    pub fn tap_values(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let taps = self.features(&mut g, x)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }

    /// Sum of all extractor weights, for detecting accidental updates.
    pub fn checksum(&self) -> f64 {
        self.params.iter().flat_map(|(_, t)| t.data()).map(|v| v.as_f64()).sum()
    }
}

impl FeatureExtractor<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(EXTRACTOR_MAGIC);
        c.set("kind", "extractor");
        let blocks: Vec<String> = self
            .config
            .blocks
            .iter()
            .map(|b| b.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","))
            .collect();
        c.set("blocks", blocks.join("/"));
        let taps: Vec<String> = self
            .config
            .taps
            .iter()
            .map(|t| format!("{}.{}", t.block, t.layer))
            .collect();
        c.set("taps", taps.join(","));
        c.set("in_channels", self.config.in_channels);
        c.set("kernel", self.config.kernel);
        c.set("replicate_channels", self.config.replicate_channels);
        c.tensors = self.params.clone();
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, EXTRACTOR_MAGIC)?;
        let blocks = c
            .require("blocks", path)?
            .split('/')
            .map(checkpoint::parse_list)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(path, "bad `blocks`"))?;
        let taps = c
            .require("taps", path)?
            .split(',')
            .map(|t| {
                let (b, l) = t.split_once('.')?;
                Some(Tap {
                    block: b.parse().ok()?,
                    layer: l.parse().ok()?,
                })
            })
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::format(path, "bad `taps`"))?;
        let config = ExtractorConfig {
            blocks,
            taps,
            in_channels: checkpoint::parse_value(&c, "in_channels", path)?,
            kernel: checkpoint::parse_value(&c, "kernel", path)?,
            replicate_channels: checkpoint::parse_value(&c, "replicate_channels", path)?,
        };
        Self::from_params(config, c.tensors)
    }
}

pub fn loss_img<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, lambda_img: f64) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let n = g.value(d).len() as f64;
    let l = g.l1_norm(d)?;
    g.scale(l, lambda_img / n)
}

/// `λ · Σ ‖w‖₁` over the given kernel variables.
pub fn loss_weights<T: Real>(g: &mut Graph<T>, kernels: &[Var], lambda_weights: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &k in kernels {
        let l = g.l1_norm(k)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let total = match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    g.scale(total, lambda_weights)
}

pub fn loss_activity<T: Real>(g: &mut Graph<T>, residual: Var, lambda_activity: f64) -> Result<Var> {
    let l = g.l1_norm(residual)?;
    g.scale(l, lambda_activity)
}

/// Perceptual term. Target features are computed without gradients.
pub fn loss_feat<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    extractor: &FeatureExtractor<T>,
    lambda_feat: f64,
    lambda_feat_i: &[f64],
) -> Result<Var> {
    if lambda_feat_i.len() != extractor.config().taps.len() {
        return Err(Error::Config(format!(
            "{} per-tap weights for {} taps",
            lambda_feat_i.len(),
            extractor.config().taps.len()
        )));
    }
    let target = if g.requires_grad(target) {
        g.constant(g.value(target).clone())
    } else {
        target
    };
    let fp = extractor.features(g, pred)?;
    let ft = extractor.features(g, target)?;
    let mut acc: Option<Var> = None;
    for ((&a, &b), &li) in fp.iter().zip(&ft).zip(lambda_feat_i) {
        if li == 0.0 {
            continue;
        }
        let d = g.sub(a, b)?;
        let n = g.value(d).len() as f64;
        let l = g.l1_norm(d)?;
        let l = g.scale(l, lambda_feat * li / n)?;
        acc = Some(match acc {
            Some(s) => g.add(s, l)?,
            None => l,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// Variables of the individual terms and their sum. Terms whose weight is
/// zero are constant zeros and cost nothing.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub img: Var,
    pub weights: Var,
    pub activity: Var,
    pub feat: Var,
}

/// Plain values of [`LossTerms`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub img: f64,
    pub weights: f64,
    pub activity: f64,
    pub feat: f64,
}

impl LossValues {
    pub const TERMS: [&'static str; 5] = ["total", "img", "weights", "activity", "feat"];

    pub fn get(&self, term: &str) -> f64 {
        match term {
            "total" => self.total,
            "img" => self.img,
            "weights" => self.weights,
            "activity" => self.activity,
            "feat" => self.feat,
            _ => f64::NAN,
        }
    }

    /// The first non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::TERMS.iter().rev().find(|t| !self.get(t).is_finite()).copied()
    }
}

impl LossTerms {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            total: v(self.total),
            img: v(self.img),
            weights: v(self.weights),
            activity: v(self.activity),
            feat: v(self.feat),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn loss_total<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    residual: Var,
    model: &Model<T>,
    vars: &ParamVars,
    weights: &LossWeights,
    extractor: Option<&FeatureExtractor<T>>,
) -> Result<LossTerms> {
    let zero = |g: &mut Graph<T>| g.constant(Tensor::scalar(T::zero()));
    let img = if weights.lambda_img > 0.0 {
        loss_img(g, pred, target, weights.lambda_img)?
    } else {
        zero(g)
    };
    let wt = if weights.lambda_weights > 0.0 {
        loss_weights(g, &model.kernel_vars(vars), weights.lambda_weights)?
    } else {
        zero(g)
    };
    let act = if weights.lambda_activity > 0.0 {
        loss_activity(g, residual, weights.lambda_activity)?
    } else {
        zero(g)
    };
    let feat = if weights.lambda_feat > 0.0 {
        let ex = extractor.ok_or_else(|| Error::Config("lambda_feat > 0 needs a feature extractor".into()))?;
        loss_feat(g, pred, target, ex, weights.lambda_feat, &weights.lambda_feat_i)?
    } else {
        zero(g)
    };
    let s = g.add(img, wt)?;
    let s = g.add(s, act)?;
    let total = g.add(s, feat)?;
    Ok(LossTerms {
        total,
        img,
        weights: wt,
        activity: act,
        feat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn img_term_arithmetic() {
        let mut g = Graph::new();
        let p = g.variable(t(&[1, 1, 2, 2], &[1.0, -1.0, 2.0, 0.0]));
        let y = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let l = loss_img(&mut g, p, y, 1.0).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let same = loss_img(&mut g, p, p, 1.0).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn img_term_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let p = g.variable(Tensor::zeros(&[1, 1, 2, 2]));
        let y = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(matches!(loss_img(&mut g, p, y, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn weight_term_arithmetic() {
        let mut g = Graph::new();
        let k = g.variable(t(&[2], &[0.5, -0.5]));
        let l = loss_weights(&mut g, &[k], 2.0).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l4 = loss_weights(&mut g, &[k], 4.0).unwrap();
        assert_eq!(g.value(l4).item(), 4.0);

        let mut m = Model::<f64>::build(&ModelConfig::new(1, vec![2, 2], 0)).unwrap();
        m.params_mut().iter_mut().for_each(|p| p.data_mut().fill(0.0));
        let vars = m.attach(&mut g, true);
        let l = loss_weights(&mut g, &m.kernel_vars(&vars), 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn activity_term_and_gradient() {
        let mut g = Graph::new();
        let a = g.variable(t(&[2], &[0.1, -0.3]));
        let l = loss_activity(&mut g, a, 1.0).unwrap();
        assert!((g.value(l).item() - 0.4).abs() < 1e-15);
        let l3 = loss_activity(&mut g, a, 3.0).unwrap();
        g.backward(l3).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, -3.0]);
    }

    fn small_extractor() -> FeatureExtractor<f64> {
        FeatureExtractor::random(ExtractorConfig::vgg16_scaled(32), 7).unwrap()
    }

    #[test]
    fn feat_term_zero_cases() {
        let ex = small_extractor();
        let mut rng = SplitMix64::new(2);
        let x = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.normal());
        let y = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.normal());
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let same = loss_feat(&mut g, xv, xv, &ex, 1.0, &[1.0; 5]).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let yv = g.constant(y);
        let off = loss_feat(&mut g, xv, yv, &ex, 1.0, &[0.0; 5]).unwrap();
        assert_eq!(g.value(off).item(), 0.0);
        let on = loss_feat(&mut g, xv, yv, &ex, 1.0, &[1.0; 5]).unwrap();
        assert!(g.value(on).item() > 0.0);
    }

    #[test]
    fn feat_term_too_small_patch() {
        let ex = small_extractor();
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(matches!(
            loss_feat(&mut g, x, x, &ex, 1.0, &[1.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn vgg16_tap_shapes_at_256() {
        let cfg = ExtractorConfig::vgg16();
        assert_eq!(
            cfg.tap_shapes(256, 256),
            vec![
                (64, 256, 256),
                (128, 128, 128),
                (256, 64, 64),
                (512, 32, 32),
                (512, 16, 16)
            ]
        );
    }

    #[test]
    fn extractor_is_deterministic_and_round_trips() {
        let a = FeatureExtractor::<f32>::random(ExtractorConfig::vgg16_scaled(16), 7).unwrap();
        let b = FeatureExtractor::<f32>::random(ExtractorConfig::vgg16_scaled(16), 7).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.feat");
        a.save(&p).unwrap();
        let c = load_extractor(&p).unwrap();
        let mut rng = SplitMix64::new(5);
        let x = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.normal() as f32);
        assert_eq!(a.tap_values(&x).unwrap(), c.tap_values(&x).unwrap());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights {
            lambda_img: 0.0,
            lambda_weights: 0.0,
            lambda_activity: 0.0,
            lambda_feat: 0.0,
            lambda_feat_i: vec![1.0; 5],
        };
        assert!(zero.validate().is_err());
        let neg = LossWeights {
            lambda_activity: -1.0,
            ..LossWeights::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn taps_must_be_ordered() {
        let mut cfg = ExtractorConfig::vgg16();
        cfg.taps.swap(0, 1);
        assert!(cfg.validate().is_err());
    }
}
