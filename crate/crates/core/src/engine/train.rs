use std::fmt::Write as _;

use super::adam::{step_adam, AdamConfig, AdamState};
use crate::data::{Dihedral, PatchSet};
use crate::error::{Error, Result};
use crate::loss::{loss_total, FeatureExtractor, LossValues, LossWeights};
use crate::model::Model;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub weights: LossWeights,
    /// Validate every this many steps (and after the last one). Zero disables
    /// validation.
    pub val_every: usize,
    /// Apply a random symmetry to every sample as it is drawn.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 1000,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            val_every: 250,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adam.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: LossValues,
    /// Mean absolute error on the normalised validation set.
    pub val_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Parameters with the lowest validation error, or the final ones when
    /// validation never ran.
    pub best: Model<f32>,
    pub best_step: usize,
    pub best_val_l1: Option<f64>,
    pub history: Vec<HistoryRow>,
}

impl TrainOutcome {
    /// Tab-separated history: step, each loss term, validation error.
    pub fn history_tsv(&self) -> String {
        let mut s = String::from("step");
        for t in LossValues::TERMS {
            s.push('\t');
            s.push_str(t);
        }
        s.push_str("\tval_l1\n");
        for r in &self.history {
            let _ = write!(s, "{}", r.step);
            for t in LossValues::TERMS {
                let _ = write!(s, "\t{:e}", r.loss.get(t));
            }
            match r.val_l1 {
                Some(v) => {
                    let _ = writeln!(s, "\t{v:e}");
                }
                None => s.push_str("\t-\n"),
            }
        }
        s
    }
}

/// Observer verdict after each event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    /// Finish the current step and end the run.
    Stop,
}

/// Events reported to the observer of [`train_with`].
pub enum Progress<'a> {
    Step(&'a HistoryRow),
    Validated {
        step: usize,
        val_l1: f64,
        improved: bool,
        model: &'a Model<f32>,
    },
}

pub fn train(
    model: Model<f32>,
    train_set: &PatchSet,
    val_set: Option<&PatchSet>,
    cfg: &TrainConfig,
    extractor: Option<&FeatureExtractor<f32>>,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, extractor, |_| Ok(Flow::Continue))
}

fn check_set(set: &PatchSet, what: &str, model: &Model<f32>) -> Result<()> {
    if !set.normalized {
        return Err(Error::Contract(format!("{what} patches must be normalised")));
    }
    if set.is_empty() {
        return Err(Error::Contract(format!("{what} patch set is empty")));
    }
    model.check_input(&[1, model.config().in_channels, set.patch_size, set.patch_size])
}

/// Minibatch Adam on the composite loss. Batch `k` is drawn from a stream
/// seeded by `(seed, k)`, so a run is reproducible bit for bit.
pub fn train_with(
    mut model: Model<f32>,
    train_set: &PatchSet,
    val_set: Option<&PatchSet>,
    cfg: &TrainConfig,
    extractor: Option<&FeatureExtractor<f32>>,
    mut observe: impl FnMut(Progress<'_>) -> Result<Flow>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_set(train_set, "training", &model)?;
    if train_set
        .patches
        .iter()
        .any(|p| p.target.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Contract("training targets contain nodata".into()));
    }
    if let Some(v) = val_set {
        check_set(v, "validation", &model)?;
    }

    let n = train_set.patch_size;
    let b = cfg.batch_size;
    let mut state = AdamState::new(model.params());
    let mut history = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize, Model<f32>)> = None;

    for step in 1..=cfg.steps {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, step as u64));
        let mut xs = Vec::with_capacity(b * n * n);
        let mut ys = Vec::with_capacity(b * n * n);
        for _ in 0..b {
            let p = &train_set.patches[rng.below(train_set.len() as u64) as usize];
            if cfg.augment {
                let op = Dihedral::ALL[rng.below(8) as usize];
                let (x, y) = op.apply_pair(&p.input, &p.target, n)?;
                xs.extend(x);
                ys.extend(y);
            } else {
                xs.extend_from_slice(&p.input);
                ys.extend_from_slice(&p.target);
            }
        }

        let mut g = Graph::new();
        let vars = model.attach(&mut g, true);
        let x = g.constant(Tensor::new(vec![b, 1, n, n], xs)?);
        let y = g.constant(Tensor::new(vec![b, 1, n, n], ys)?);
        let out = model.forward(&mut g, &vars, x)?;
        let terms = loss_total(
            &mut g,
            out.prediction,
            y,
            out.residual,
            &model,
            &vars,
            &cfg.weights,
            extractor,
        )?;
        let loss = terms.values(&g);
        if let Some(term) = loss.non_finite() {
            return Err(Error::NonFinite { term, step });
        }
        g.backward(terms.total)?;
        let grads: Vec<&[f32]> = vars
            .0
            .iter()
            .map(|&v| g.grad(v).expect("trainable parameter has a gradient"))
            .collect();
        if grads.iter().any(|gr| gr.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { term: "gradient", step });
        }
        step_adam(model.params_mut(), &grads, &mut state, &cfg.adam)?;

        let mut stop = false;
        let mut row = HistoryRow {
            step,
            loss,
            val_l1: None,
        };
        let due = cfg.val_every > 0 && (step % cfg.val_every == 0 || step == cfg.steps);
        if let (Some(v), true) = (val_set, due) {
            let l1 = validation_l1(&model, v)?;
            row.val_l1 = Some(l1);
            let improved = best.as_ref().is_none_or(|(b, _, _)| l1 < *b);
            if improved {
                best = Some((l1, step, model.clone()));
            }
            stop |= observe(Progress::Validated {
                step,
                val_l1: l1,
                improved,
                model: &model,
            })? == Flow::Stop;
        }
        stop |= observe(Progress::Step(&row))? == Flow::Stop;
        history.push(row);
        if stop {
            break;
        }
    }

    let (best_val_l1, best_step, best_model) = match best {
        Some((l, s, m)) => (Some(l), s, m),
        None => (None, history.len(), model.clone()),
    };
    Ok(TrainOutcome {
        model,
        best: best_model,
        best_step,
        best_val_l1,
        history,
    })
}

/// Mean `|ŷ − y|` over the finite targets of a normalised patch set.
pub fn validation_l1(model: &Model<f32>, set: &PatchSet) -> Result<f64> {
    let n = set.patch_size;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for p in &set.patches {
        let x = Tensor::new(vec![1, 1, n, n], p.input.clone())?;
        let (pred, _) = model.forward_residual(&x)?;
        for (&a, &t) in pred.data().iter().zip(&p.target) {
            if t.is_finite() {
                sum += (a as f64 - t as f64).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Contract("validation set has no valid target pixels".into()));
    }
    Ok(sum / count as f64)
}
