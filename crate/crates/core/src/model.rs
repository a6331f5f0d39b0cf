//! Residual encoder-decoder.
//!
//! ```text
//! X ─► enc0 ─┬─► pool ─► enc1 ─┬─► pool ─► ... ─► bottleneck
//!            │                 │                     │
//!            │                 └──────(+)◄── dec1 ◄──┘ (upsample, conv, ReLU)
//!            └──────────(+)◄── dec0 ◄── ...
//!                        │
//!                        └─► head (linear conv) = f(X)      ŷ = X + f(X)
//! ```
//!
//! Encoder levels are conv + PReLU followed by 2x2 max pooling, the
//! bottleneck is conv + PReLU, and each decoder level upsamples by pixel
//! repetition, applies conv + ReLU and adds the pre-pooling output of the
//! encoder level at the same depth. All convolutions use 4x4 kernels.

use std::path::Path;

use crate::checkpoint::{self, Container, MODEL_MAGIC};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channel width per level, bottleneck last; `depth + 1` entries.
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub prelu_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Full-scale stand-in: five levels from 64 to 1024 channels.
    fn default() -> Self {
        Self {
            depth: 5,
            channels: vec![64, 128, 256, 512, 1024, 1024],
            in_channels: 1,
            prelu_init: 0.25,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(depth: usize, channels: Vec<usize>, seed: u64) -> Self {
        Self {
            depth,
            channels,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.channels.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "depth {} needs {} channel widths, got {}",
                self.depth,
                self.depth + 1,
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel widths must be at least 1".into()));
        }
        if !self.prelu_init.is_finite() {
            return Err(Error::Config("prelu_init must be finite".into()));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let conv = |specs: &mut Vec<ParamSpec>, name: String, cin: usize, cout: usize, act: Activation| {
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, KERNEL, KERNEL],
                role: ParamRole::Kernel(act),
            });
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                role: ParamRole::Bias,
            });
            if act == Activation::Prelu {
                specs.push(ParamSpec {
                    name: format!("{name}.slope"),
                    shape: vec![cout],
                    role: ParamRole::Slope,
                });
            }
        };
        let c = &self.channels;
        for k in 0..self.depth {
            let cin = if k == 0 { self.in_channels } else { c[k - 1] };
            conv(&mut specs, format!("enc{k}"), cin, c[k], Activation::Prelu);
        }
        conv(
            &mut specs,
            "bottleneck".into(),
            c[self.depth - 1],
            c[self.depth],
            Activation::Prelu,
        );
        for k in (0..self.depth).rev() {
            conv(&mut specs, format!("dec{k}"), c[k + 1], c[k], Activation::Relu);
        }
        conv(&mut specs, "head".into(), c[0], 1, Activation::Linear);
        specs
    }
}

/// Closed-form parameter count: `cin * cout * 16 + cout` per convolution plus
/// one slope per PReLU channel.
pub fn param_count(config: &ModelConfig) -> usize {
    let c = &config.channels;
    let conv = |cin: usize, cout: usize| cin * cout * KERNEL * KERNEL + cout;
    let mut total = 0;
    for k in 0..config.depth {
        let cin = if k == 0 { config.in_channels } else { c[k - 1] };
        total += conv(cin, c[k]) + c[k];
    }
    total += conv(c[config.depth - 1], c[config.depth]) + c[config.depth];
    for k in 0..config.depth {
        total += conv(c[k + 1], c[k]);
    }
    total + conv(c[0], 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Prelu,
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Kernel(Activation),
    Bias,
    Slope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

/// Model parameters attached to a [`Graph`], in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// Prediction and the residual that produced it, `prediction = input + residual`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualOutput {
    pub prediction: Var,
    pub residual: Var,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialised model. Kernels are drawn from a zero-mean
    /// normal with fan-in scaling: `sqrt(2 / ((1 + a^2) fan_in))` before a
    /// PReLU of slope `a`, `sqrt(2 / fan_in)` before a ReLU and
    /// `sqrt(1 / fan_in)` for the linear head. Biases start at zero and PReLU
    /// slopes at `prelu_init`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.layout();
        let a = config.prelu_init;
        let params = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| match spec.role {
                ParamRole::Kernel(act) => {
                    let fan_in = (spec.shape[1] * KERNEL * KERNEL) as f64;
                    let std = match act {
                        Activation::Prelu => (2.0 / ((1.0 + a * a) * fan_in)).sqrt(),
                        Activation::Relu => (2.0 / fan_in).sqrt(),
                        Activation::Linear => (1.0 / fan_in).sqrt(),
                    };
                    let mut rng = SplitMix64::new(derive_seed(config.seed, i as u64));
                    Tensor::from_fn(&spec.shape, |_| T::from_f64(std * rng.normal()))
                }
                ParamRole::Bias => Tensor::zeros(&spec.shape),
                ParamRole::Slope => Tensor::full(&spec.shape, T::from_f64(a)),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            specs,
            params,
        })
    }

    /// Assembles a model from named tensors, checking them against the layout.
    pub fn from_params(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let specs = config.layout();
        if named.len() != specs.len() {
            return Err(Error::Mismatch(format!(
                "configuration expects {} tensors, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Mismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    name,
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config: config.clone(),
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.len()).sum()
    }

    /// Zeroes the head, making the model the identity map.
    pub fn zero_head(&mut self) {
        for name in ["head.weight", "head.bias"] {
            if let Some(t) = self.param_mut(name) {
                t.data_mut().fill(T::zero());
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Puts the parameters into `g`, as variables when `trainable`.
    pub fn attach(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|t| {
                    if trainable {
                        g.variable(t.clone())
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// Kernel variables only (the weights penalised by the L1 regulariser).
    pub fn kernel_vars(&self, vars: &ParamVars) -> Vec<Var> {
        self.specs
            .iter()
            .zip(&vars.0)
            .filter(|(s, _)| matches!(s.role, ParamRole::Kernel(_)))
            .map(|(_, &v)| v)
            .collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(Error::Dimension(format!(
                "model input must be [n, c, h, w], got {shape:?}"
            )));
        };
        if *c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} is not a multiple of {m} (2^depth) in both dimensions"
            )));
        }
        Ok(())
    }

    /// Records `ŷ = X + f(X)` on `g`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &ParamVars, input: Var) -> Result<ResidualOutput> {
        self.check_input(g.value(input).shape())?;
        let p = &vars.0;
        let mut cursor = 0;
        let mut next = || {
            let v = p[cursor];
            cursor += 1;
            v
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for _ in 0..self.config.depth {
            let (w, b, s) = (next(), next(), next());
            let y = g.conv2d(x, w, b)?;
            let y = g.prelu(y, s)?;
            skips.push(y);
            x = g.maxpool2(y)?;
        }
        let (w, b, s) = (next(), next(), next());
        let y = g.conv2d(x, w, b)?;
        x = g.prelu(y, s)?;
        for skip in skips.into_iter().rev() {
            let (w, b) = (next(), next());
            let up = g.upsample2(x)?;
            let y = g.conv2d(up, w, b)?;
            let y = g.relu(y)?;
            x = g.add(y, skip)?;
        }
        let (w, b) = (next(), next());
        let residual = g.conv2d(x, w, b)?;
        let prediction = g.add(input, residual)?;
        Ok(ResidualOutput { prediction, residual })
    }

    /// Inference without gradients. Returns `(prediction, residual)`.
    pub fn forward_residual(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars = self.attach(&mut g, false);
        let x = g.constant(input.clone());
        let out = self.forward(&mut g, &vars, x)?;
        let residual = g.take(out.residual);
        let prediction = g.take(out.prediction);
        Ok((prediction, residual))
    }
}

impl Model<f32> {
    pub fn to_container(&self, norm: Option<&NormStats>) -> Container {
        let mut c = Container::new(MODEL_MAGIC);
        c.set("kind", "model");
        c.set("depth", self.config.depth);
        let widths: Vec<String> = self.config.channels.iter().map(|c| c.to_string()).collect();
        c.set("channels", widths.join(","));
        c.set("in_channels", self.config.in_channels);
        c.set("prelu_init", self.config.prelu_init);
        c.set("seed", self.config.seed);
        if let Some(n) = norm {
            c.set("norm.global_std", n.global_std);
        }
        c.tensors = self
            .specs
            .iter()
            .zip(&self.params)
            .map(|(s, t)| (s.name.clone(), t.clone()))
            .collect();
        c
    }

    pub fn save(&self, norm: Option<&NormStats>, path: &Path) -> Result<()> {
        self.to_container(norm).write(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<NormStats>)> {
        let c = Container::read(path, MODEL_MAGIC)?;
        Self::from_container(c, path)
    }

    pub fn from_container(c: Container, path: &Path) -> Result<(Self, Option<NormStats>)> {
        let channels = checkpoint::parse_list(c.require("channels", path)?)
            .ok_or_else(|| Error::format(path, "bad `channels` list"))?;
        let config = ModelConfig {
            depth: checkpoint::parse_value(&c, "depth", path)?,
            channels,
            in_channels: checkpoint::parse_value(&c, "in_channels", path)?,
            prelu_init: checkpoint::parse_value(&c, "prelu_init", path)?,
            seed: checkpoint::parse_value(&c, "seed", path)?,
        };
        let norm = match c.get("norm.global_std") {
            Some(_) => Some(NormStats::new(checkpoint::parse_value(&c, "norm.global_std", path)?)?),
            None => None,
        };
        let model = Self::from_params(&config, c.tensors)?;
        Ok((model, norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_count() {
        // 1 -> 8 conv with a 4x4 kernel, then a PReLU over 8 channels.
        assert_eq!(1 * 8 * 16 + 8, 136);
        let cfg = ModelConfig::new(1, vec![8, 8], 0);
        let enc0: usize = cfg
            .layout()
            .iter()
            .filter(|s| s.name.starts_with("enc0.") && s.role != ParamRole::Slope)
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert_eq!(enc0, 136);
        let slope: usize = cfg
            .layout()
            .iter()
            .filter(|s| s.name == "enc0.slope")
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        assert_eq!(slope, 8);
    }

    #[test]
    fn depth2_hand_count() {
        // enc0 1->8: 128+8+8, enc1 8->16: 2048+16+16, bottleneck 16->32: 8192+32+32,
        // dec1 32->16: 8192+16, dec0 16->8: 2048+8, head 8->1: 128+1.
        let expected = 144 + 2080 + 8256 + 8208 + 2056 + 129;
        let cfg = ModelConfig::new(2, vec![8, 16, 32], 1);
        assert_eq!(param_count(&cfg), expected);
        let names: Vec<String> = cfg.layout().into_iter().map(|s| s.name).collect();
        assert_eq!(
            names,
            [
                "enc0.weight",
                "enc0.bias",
                "enc0.slope",
                "enc1.weight",
                "enc1.bias",
                "enc1.slope",
                "bottleneck.weight",
                "bottleneck.bias",
                "bottleneck.slope",
                "dec1.weight",
                "dec1.bias",
                "dec0.weight",
                "dec0.bias",
                "head.weight",
                "head.bias",
            ]
        );
        let m = Model::<f32>::build(&cfg).unwrap();
        assert_eq!(m.num_params(), expected);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::new(2, vec![4, 8, 8], 17);
        let a = Model::<f32>::build(&cfg).unwrap();
        let b = Model::<f32>::build(&cfg).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(&ModelConfig { seed: 18, ..cfg }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig::new(0, vec![4], 0).validate().is_err());
        assert!(ModelConfig::new(2, vec![4, 8], 0).validate().is_err());
        assert!(ModelConfig::new(1, vec![4, 0], 0).validate().is_err());
    }

    #[test]
    fn input_size_must_match_depth() {
        let m = Model::<f32>::build(&ModelConfig::new(3, vec![2, 2, 2, 2], 0)).unwrap();
        let err = m.forward_residual(&Tensor::zeros(&[1, 1, 20, 16])).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"), "{err}");
        assert!(m.forward_residual(&Tensor::zeros(&[1, 1, 24, 16])).is_ok());
    }

    #[test]
    fn zero_head_is_identity() {
        let mut m = Model::<f32>::build(&ModelConfig::new(2, vec![4, 4, 4], 3)).unwrap();
        m.zero_head();
        let mut rng = SplitMix64::new(1);
        let x = Tensor::from_fn(&[2, 1, 8, 12], |_| rng.normal() as f32 * 10.0);
        let (y, r) = m.forward_residual(&x).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fully_convolutional_shapes() {
        let m = Model::<f32>::build(&ModelConfig::new(2, vec![2, 2, 2], 3)).unwrap();
        for (h, w) in [(8, 8), (16, 32), (36, 4)] {
            let (y, _) = m.forward_residual(&Tensor::zeros(&[1, 1, h, w])).unwrap();
            assert_eq!(y.shape(), &[1, 1, h, w]);
        }
    }
}
