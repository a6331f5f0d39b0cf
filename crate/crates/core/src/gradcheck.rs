//! Finite-difference verification of every differentiable operation and of
//! the full composite loss.
//!
//! Each case is a scalar function of a few tensors. Analytic gradients come
//! from [`Graph::backward`]; numeric ones from central differences in f64.
//! A coordinate is skipped when the perturbation moves any activation,
//! pooling choice or absolute value across its kink, since the central
//! difference is meaningless there.

use std::fmt::Write as _;

use crate::error::Result;
use crate::loss::{loss_total, ExtractorConfig, FeatureExtractor, LossWeights};
use crate::model::{Model, ModelConfig, ParamVars};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Graph, OpKind, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-4;
pub const COMPOSITE: &str = "composite_loss";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Corrupts one operation's backward pass by a factor (negative control).
    pub fault: Option<(OpKind, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results
            .iter()
            .all(|r| r.checked > 0 && r.max_rel_error < self.tolerance)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>8} {:>8}  status",
            "check", "max rel err", "coords", "skipped"
        );
        for r in &self.results {
            let ok = r.checked > 0 && r.max_rel_error < self.tolerance;
            let _ = writeln!(
                s,
                "{:<16} {:>12.3e} {:>8} {:>8}  {}",
                r.name,
                r.max_rel_error,
                r.checked,
                r.skipped,
                if ok { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// Relative error with a floor so that two vanishing gradients compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("valid shape")
}

fn run_case(case: &Case, opts: &GradcheckOptions) -> Result<CheckResult> {
    let eval = |inputs: &[Tensor<f64>], grads: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        if let Some((kind, factor)) = opts.fault {
            g.inject_fault(kind, factor);
        }
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                if grads {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = (case.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = eval(&case.inputs, true)?;
    let base_sig = g.kink_signature();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();
    drop(g);

    let h = opts.step;
    let mut result = CheckResult {
        name: case.name.clone(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut inputs = case.inputs.clone();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let (gp, _, op) = eval(&inputs, false)?;
            inputs[i].data_mut()[j] = orig - h;
            let (gm, _, om) = eval(&inputs, false)?;
            inputs[i].data_mut()[j] = orig;
            if gp.kink_signature() != base_sig || gm.kink_signature() != base_sig {
                result.skipped += 1;
                continue;
            }
            let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
            result.max_rel_error = result.max_rel_error.max(relative_error(grad[j], numeric));
            result.checked += 1;
        }
    }
    Ok(result)
}

/// Scalar probe `Σ w ⊙ y` with fixed random weights.
fn probe(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random(&mut SplitMix64::new(rng_seed), &shape);
    g.dot(y, &w)
}

fn op_case(kind: OpKind, seed: u64) -> Case {
    let mut rng = SplitMix64::new(seed);
    let probe_seed = rng.next_u64();
    let name = kind.name().to_string();
    let (inputs, build): (Vec<Tensor<f64>>, Build) = match kind {
        OpKind::Conv2d => (
            vec![
                random(&mut rng, &[2, 2, 5, 6]),
                random(&mut rng, &[3, 2, 4, 4]),
                random(&mut rng, &[3]),
            ],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::MaxPool2 => (
            vec![random(&mut rng, &[2, 2, 4, 6])],
            Box::new(move |g, v| {
                let y = g.maxpool2(v[0])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Upsample2 => (
            vec![random(&mut rng, &[2, 2, 3, 4])],
            Box::new(move |g, v| {
                let y = g.upsample2(v[0])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Prelu => (
            vec![random(&mut rng, &[2, 3, 4, 4]), random(&mut rng, &[3])],
            Box::new(move |g, v| {
                let y = g.prelu(v[0], v[1])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Relu => (
            vec![random(&mut rng, &[2, 3, 4, 4])],
            Box::new(move |g, v| {
                let y = g.relu(v[0])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Add => (
            vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 3, 4])],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Sub => (
            vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 3, 4])],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Scale => (
            vec![random(&mut rng, &[3, 5])],
            Box::new(move |g, v| {
                let y = g.scale(v[0], -1.7)?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::L1Norm => (vec![random(&mut rng, &[2, 3, 4])], Box::new(|g, v| g.l1_norm(v[0]))),
        OpKind::Dot => (
            vec![random(&mut rng, &[2, 3, 4])],
            Box::new(move |g, v| probe(g, v[0], probe_seed)),
        ),
        OpKind::RepeatChannels => (
            vec![random(&mut rng, &[2, 1, 3, 4])],
            Box::new(move |g, v| {
                let y = g.repeat_channels(v[0], 3)?;
                probe(g, y, probe_seed)
            }),
        ),
        OpKind::Leaf => unreachable!("leaves are not operations"),
    };
    Case { name, inputs, build }
}

/// Depth-2 model with 4 channels on a 16x16 pair, all four loss terms
/// active, with a narrow random-weight feature extractor.
fn composite_case(seed: u64) -> Result<Case> {
    let model: Model<f64> = Model::build(&ModelConfig::new(2, vec![4, 4, 4], derive_seed(seed, 0)))?;
    let extractor: FeatureExtractor<f64> =
        FeatureExtractor::random(ExtractorConfig::vgg16_scaled(64), derive_seed(seed, 1))?;
    let mut rng = SplitMix64::new(derive_seed(seed, 2));
    let x = random(&mut rng, &[1, 1, 16, 16]);
    let y = random(&mut rng, &[1, 1, 16, 16]);
    let weights = LossWeights {
        lambda_img: 1.0,
        lambda_weights: 1e-3,
        lambda_activity: 1e-2,
        lambda_feat: 1.0,
        ..LossWeights::default()
    };
    let inputs = model.params().to_vec();
    let build: Build = Box::new(move |g, v| {
        let vars = ParamVars(v.to_vec());
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let out = model.forward(g, &vars, xv)?;
        let terms = loss_total(
            g,
            out.prediction,
            yv,
            out.residual,
            &model,
            &vars,
            &weights,
            Some(&extractor),
        )?;
        Ok(terms.total)
    });
    Ok(Case {
        name: COMPOSITE.to_string(),
        inputs,
        build,
    })
}

/// Names of every registered check, in run order.
pub fn registry() -> Vec<&'static str> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|k| k.name())
        .chain(std::iter::once(COMPOSITE))
        .collect()
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut results = Vec::new();
    for (i, &kind) in OpKind::DIFFERENTIABLE.iter().enumerate() {
        results.push(run_case(&op_case(kind, derive_seed(opts.seed, i as u64)), opts)?);
    }
    results.push(run_case(&composite_case(derive_seed(opts.seed, 1000))?, opts)?);
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_op_passes_and_fault_is_caught() {
        let opts = GradcheckOptions::default();
        let r = run_case(&op_case(OpKind::Upsample2, 1), &opts).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let bad = GradcheckOptions {
            fault: Some((OpKind::Upsample2, 1.5)),
            ..opts
        };
        let r = run_case(&op_case(OpKind::Upsample2, 1), &bad).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
