//! `key = value` run configuration shared by every command.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. Later
//! assignments win, so command-line overrides are applied after the file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::loss::{ExtractorConfig, FeatureExtractor};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::synth::{RoofType, SceneSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Cut train, validation and test regions out of each raster.
    Regions,
    /// Whole scenes are assigned to one role each.
    Scenes,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorSource {
    None,
    /// Random weights with every VGG16 width divided by the given factor.
    Random {
        divisor: usize,
    },
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub patch_size: usize,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Random training patches per raster (region mode).
    pub train_patches: usize,
    pub split: SplitMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            patch_size: 256,
            val_frac: 0.09,
            test_frac: 0.09,
            train_patches: 64,
            split: SplitMode::Regions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorSource,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub tile: usize,
    pub overlap: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            extractor: ExtractorSource::None,
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            tile: 512,
            overlap: 64,
        };
        c.reseed();
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        [a] => Ok((a, a)),
        _ => Err(Error::Config(format!("{key}: expected min,max"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses `key=value`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn reseed(&mut self) {
        self.model.seed = derive_seed(self.seed, 0);
        self.train.seed = derive_seed(self.seed, 1);
        self.scene.seed = derive_seed(self.seed, 2);
    }

    /// Seed for patch sampling.
    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, 3)
    }

    /// Seed for a random-weight feature extractor.
    pub fn extractor_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.train.weights;
        let s = &mut self.scene;
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.reseed();
            }
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.channels" => self.model.channels = parse_list(key, v)?,
            "model.prelu_init" => self.model.prelu_init = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.val_every" => self.train.val_every = parse(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "loss.img" => w.lambda_img = parse(key, v)?,
            "loss.weights" => w.lambda_weights = parse(key, v)?,
            "loss.activity" => w.lambda_activity = parse(key, v)?,
            "loss.feat" => w.lambda_feat = parse(key, v)?,
            "loss.feat_taps" => w.lambda_feat_i = parse_list(key, v)?,
            "loss.extractor" => {
                self.extractor = match v {
                    "none" => ExtractorSource::None,
                    "random" => ExtractorSource::Random { divisor: 1 },
                    _ => match v.strip_prefix("random:") {
                        Some(d) => ExtractorSource::Random {
                            divisor: parse(key, d)?,
                        },
                        None => ExtractorSource::File(PathBuf::from(v)),
                    },
                }
            }
            "scene.extent" => {
                s.width = parse(key, v)?;
                s.height = s.width;
            }
            "scene.width" => s.width = parse(key, v)?,
            "scene.height" => s.height = parse(key, v)?,
            "scene.gsd" => s.gsd = parse(key, v)?,
            "scene.buildings" => s.building_count = parse(key, v)?,
            "scene.building_size" => s.building_size = parse_range(key, v)?,
            "scene.building_height" => s.building_height = parse_range(key, v)?,
            "scene.roof_pitch" => s.roof_pitch = parse_range(key, v)?,
            "scene.roof_types" => {
                s.roof_types = v
                    .split(',')
                    .map(|r| {
                        RoofType::from_name(r.trim())
                            .ok_or_else(|| Error::Config(format!("{key}: unknown roof type {r:?}")))
                    })
                    .collect::<Result<_>>()?
            }
            "scene.rotated" => s.rotated = parse_bool(key, v)?,
            "scene.terrain_amplitude" => s.terrain_amplitude = parse(key, v)?,
            "scene.terrain_wavelength" => s.terrain_wavelength = parse(key, v)?,
            "scene.noise_sigma" => s.noise_sigma = parse(key, v)?,
            "scene.hole_rate" => s.hole_rate = parse(key, v)?,
            "scene.hole_cluster_size" => s.hole_cluster_size = parse(key, v)?,
            "scene.vegetation_blobs" => s.vegetation_blob_count = parse(key, v)?,
            "scene.vegetation_height" => s.vegetation_height = parse_range(key, v)?,
            "scene.vegetation_radius" => s.vegetation_radius = parse_range(key, v)?,
            "data.patch_size" => self.data.patch_size = parse(key, v)?,
            "data.val_frac" => self.data.val_frac = parse(key, v)?,
            "data.test_frac" => self.data.test_frac = parse(key, v)?,
            "data.train_patches" => self.data.train_patches = parse(key, v)?,
            "data.split" => {
                self.data.split = match v {
                    "regions" => SplitMode::Regions,
                    "scenes" => SplitMode::Scenes,
                    _ => return Err(Error::Config(format!("{key}: expected regions or scenes"))),
                }
            }
            "infer.tile" => self.tile = parse(key, v)?,
            "infer.overlap" => self.overlap = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        let d = &self.data;
        if d.patch_size == 0 || !d.patch_size.is_multiple_of(self.model.size_multiple()) {
            return Err(Error::Config(format!(
                "data.patch_size {} must be a positive multiple of {}",
                d.patch_size,
                self.model.size_multiple()
            )));
        }
        if !(0.0..1.0).contains(&d.val_frac) || !(0.0..1.0).contains(&d.test_frac) || d.val_frac + d.test_frac >= 1.0 {
            return Err(Error::Config(
                "data.val_frac and data.test_frac must leave room for training".into(),
            ));
        }
        if self.tile == 0 || 2 * self.overlap >= self.tile {
            return Err(Error::Config(format!(
                "infer.overlap {} must be less than half of infer.tile {}",
                self.overlap, self.tile
            )));
        }
        Ok(())
    }

    /// The extractor named by `loss.extractor`, if the feature term is on.
    pub fn load_extractor(&self) -> Result<Option<FeatureExtractor<f32>>> {
        if self.train.weights.lambda_feat == 0.0 {
            return Ok(None);
        }
        let ex = match &self.extractor {
            ExtractorSource::None => return Err(Error::Config("loss.feat > 0 needs loss.extractor".into())),
            ExtractorSource::Random { divisor } => {
                FeatureExtractor::random(ExtractorConfig::vgg16_scaled(*divisor), self.extractor_seed())?
            }
            ExtractorSource::File(p) => FeatureExtractor::load(p)?,
        };
        if ex.config().taps.len() != self.train.weights.lambda_feat_i.len() {
            return Err(Error::Config(format!(
                "loss.feat_taps has {} weights for {} extractor taps",
                self.train.weights.lambda_feat_i.len(),
                ex.config().taps.len()
            )));
        }
        Ok(Some(ex))
    }

    /// Every key with its resolved value, parseable by [`apply_text`](Self::apply_text).
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let w = &self.train.weights;
        let s = &self.scene;
        let r = |v: (f64, f64)| format!("{},{}", v.0, v.1);
        let ex = match &self.extractor {
            ExtractorSource::None => "none".to_string(),
            ExtractorSource::Random { divisor } => format!("random:{divisor}"),
            ExtractorSource::File(p) => p.display().to_string(),
        };
        let roofs: Vec<&str> = s.roof_types.iter().map(|t| t.name()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("model.depth", self.model.depth.to_string()),
            ("model.channels", join(&self.model.channels)),
            ("model.prelu_init", self.model.prelu_init.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.lr", self.train.adam.lr.to_string()),
            ("train.beta1", self.train.adam.beta1.to_string()),
            ("train.beta2", self.train.adam.beta2.to_string()),
            ("train.eps", self.train.adam.eps.to_string()),
            ("train.val_every", self.train.val_every.to_string()),
            ("train.augment", self.train.augment.to_string()),
            ("loss.img", w.lambda_img.to_string()),
            ("loss.weights", w.lambda_weights.to_string()),
            ("loss.activity", w.lambda_activity.to_string()),
            ("loss.feat", w.lambda_feat.to_string()),
            ("loss.feat_taps", join(&w.lambda_feat_i)),
            ("loss.extractor", ex),
            ("scene.width", s.width.to_string()),
            ("scene.height", s.height.to_string()),
            ("scene.gsd", s.gsd.to_string()),
            ("scene.buildings", s.building_count.to_string()),
            ("scene.building_size", r(s.building_size)),
            ("scene.building_height", r(s.building_height)),
            ("scene.roof_pitch", r(s.roof_pitch)),
            ("scene.roof_types", roofs.join(",")),
            ("scene.rotated", s.rotated.to_string()),
            ("scene.terrain_amplitude", s.terrain_amplitude.to_string()),
            ("scene.terrain_wavelength", s.terrain_wavelength.to_string()),
            ("scene.noise_sigma", s.noise_sigma.to_string()),
            ("scene.hole_rate", s.hole_rate.to_string()),
            ("scene.hole_cluster_size", s.hole_cluster_size.to_string()),
            ("scene.vegetation_blobs", s.vegetation_blob_count.to_string()),
            ("scene.vegetation_height", r(s.vegetation_height)),
            ("scene.vegetation_radius", r(s.vegetation_radius)),
            ("data.patch_size", self.data.patch_size.to_string()),
            ("data.val_frac", self.data.val_frac.to_string()),
            ("data.test_frac", self.data.test_frac.to_string()),
            ("data.train_patches", self.data.train_patches.to_string()),
            (
                "data.split",
                match self.data.split {
                    SplitMode::Regions => "regions",
                    SplitMode::Scenes => "scenes",
                }
                .to_string(),
            ),
            ("infer.tile", self.tile.to_string()),
            ("infer.overlap", self.overlap.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(o, "{k} = {v}");
        }
        o
    }
}
