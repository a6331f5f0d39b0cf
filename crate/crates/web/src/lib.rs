//! Browser bindings: generate a synthetic scene, train a small refinement
//! model on companion scenes, and refine the degraded raster.

use dsmr_core::data::{fill_holes, sample_patches, NormStats, PatchSet, Raster, Region, Role};
use dsmr_core::engine::{evaluate, infer_tiled, train, AdamConfig, TrainConfig};
use dsmr_core::loss::LossWeights;
use dsmr_core::model::{Model, ModelConfig};
use dsmr_core::rng::derive_seed;
use dsmr_core::synth::{degrade, generate_clean, SceneSpec};
use dsmr_core::Result;
use wasm_bindgen::prelude::*;

const SIZE: usize = 64;
const TRAIN_SCENES: u64 = 24;

fn err(e: dsmr_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(seed: u64, noise: f64) -> SceneSpec {
    SceneSpec {
        seed,
        width: SIZE,
        height: SIZE,
        building_count: 2,
        gsd: 0.5,
        building_size: (3.0, 6.0),
        noise_sigma: noise,
        vegetation_blob_count: 6,
        ..SceneSpec::default()
    }
}

/// One whole-scene patch per generated scene.
fn scene_set(role: Role, master: u64, count: u64, noise: f64) -> Result<PatchSet> {
    let region = Region {
        row: 0,
        col: 0,
        height: SIZE,
        width: SIZE,
    };
    let mut set = PatchSet::new(role, SIZE);
    for i in 0..count {
        let s = spec(derive_seed(master, i), noise);
        let clean = generate_clean(&s)?;
        let input = fill_holes(&degrade(&clean, &s)?)?;
        set.extend(sample_patches(&input, &clean, region, role, 1, SIZE, 0)?)?;
    }
    Ok(set)
}

#[wasm_bindgen]
pub struct Demo {
    noise: f64,
    clean: Raster,
    degraded: Raster,
    refined: Option<Raster>,
    model: Model<f32>,
    stats: NormStats,
    train_set: PatchSet,
    steps_done: usize,
}

#[wasm_bindgen]
impl Demo {
    /// Builds the training scenes and an untrained model, then generates
    /// scene `seed`.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise: f64) -> Result<Demo, JsError> {
        Self::build(seed, noise).map_err(err)
    }

    pub fn size(&self) -> usize {
        SIZE
    }

    /// Replaces the displayed scene; the model is kept.
    pub fn generate(&mut self, seed: u32) -> Result<(), JsError> {
        self.set_scene(seed).map_err(err)
    }

    /// Runs `steps` more Adam steps and returns the last image loss.
    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.run_steps(steps).map_err(err)
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// Refines the degraded scene and returns a one-line MAE comparison.
    pub fn refine(&mut self) -> Result<String, JsError> {
        self.run_refine().map_err(err)
    }

    /// Held-out metrics over `scenes` fresh scenes.
    pub fn score(&self, scenes: u32) -> Result<String, JsError> {
        self.run_score(scenes).map_err(err)
    }

    pub fn clean(&self) -> Vec<f32> {
        self.clean.heights().to_vec()
    }

    /// Degraded heights with NaN at holes.
    pub fn degraded(&self) -> Vec<f32> {
        self.degraded.to_nan_filled()
    }

    /// Refined heights, empty before the first `refine`.
    pub fn refined(&self) -> Vec<f32> {
        self.refined.as_ref().map(|r| r.heights().to_vec()).unwrap_or_default()
    }
}

impl Demo {
    fn build(seed: u32, noise: f64) -> Result<Demo> {
        let mut train_set = scene_set(Role::Train, 0xdead, TRAIN_SCENES, noise)?;
        let stats = NormStats::from_patches(train_set.patches.iter().map(|p| p.input.as_slice()))?;
        train_set.normalize(&stats)?;
        let model = Model::build(&ModelConfig::new(2, vec![8, 16, 16], 1))?;
        let s = spec(seed as u64, noise);
        let clean = generate_clean(&s)?;
        let degraded = degrade(&clean, &s)?;
        Ok(Demo {
            noise,
            clean,
            degraded,
            refined: None,
            model,
            stats,
            train_set,
            steps_done: 0,
        })
    }

    fn set_scene(&mut self, seed: u32) -> Result<()> {
        let s = spec(seed as u64, self.noise);
        self.clean = generate_clean(&s)?;
        self.degraded = degrade(&self.clean, &s)?;
        self.refined = None;
        Ok(())
    }

    fn run_steps(&mut self, steps: usize) -> Result<f64> {
        let cfg = TrainConfig {
            batch_size: 2,
            steps,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed: self.steps_done as u64,
            weights: LossWeights::default(),
            val_every: 0,
            augment: true,
        };
        let out = train(self.model.clone(), &self.train_set, None, &cfg, None)?;
        self.model = out.model;
        self.steps_done += steps;
        Ok(out.history.last().map_or(f64::NAN, |r| r.loss.img))
    }

    fn run_refine(&mut self) -> Result<String> {
        let refined = infer_tiled(&self.model, &self.degraded, &self.stats, SIZE, 0)?;
        let filled = fill_holes(&self.degraded)?;
        let mae = |r: &Raster| {
            r.heights()
                .iter()
                .zip(self.clean.heights())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / r.len() as f64
        };
        let line = format!(
            "MAE filled input {:.3} m, refined {:.3} m after {} steps",
            mae(&filled),
            mae(&refined),
            self.steps_done
        );
        self.refined = Some(refined);
        Ok(line)
    }

    fn run_score(&self, scenes: u32) -> Result<String> {
        let mut set = scene_set(Role::Test, 0xbeef, scenes as u64, self.noise)?;
        set.normalize(&self.stats)?;
        Ok(evaluate(&self.model, &set, &self.stats)?.summary())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_round_trip() {
        let mut d = Demo::build(3, 0.3).unwrap();
        assert_eq!(d.degraded().len(), SIZE * SIZE);
        assert!(d.refined().is_empty());
        let l = d.run_steps(3).unwrap();
        assert!(l.is_finite());
        assert!(d.run_refine().unwrap().contains("MAE"));
        assert_eq!(d.refined().len(), SIZE * SIZE);
        d.set_scene(4).unwrap();
        assert!(d.run_score(2).unwrap().contains("MAE"));
        assert!(d.refined().is_empty());
    }
}
