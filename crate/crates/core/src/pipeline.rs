//! Dataset preparation: hole filling, splitting, patch sampling and
//! normalisation, plus the on-disk dataset layout.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{DataConfig, SplitMode};
use crate::data::{fill_holes, sample_patches, split_regions, NormStats, PatchSet, Raster, Region, Role};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const TRAIN_FILE: &str = "train.patches";
pub const VAL_FILE: &str = "val.patches";
pub const TEST_FILE: &str = "test.patches";
pub const NORM_FILE: &str = "norm.txt";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: PatchSet,
    pub val: PatchSet,
    pub test: PatchSet,
    pub stats: NormStats,
    /// Regions used per source raster, as `(raster index, role, region)`.
    pub regions: Vec<(usize, Role, Region)>,
    /// Training patches dropped because their ground truth had nodata.
    pub dropped: usize,
}

/// Turns aligned (input, ground truth) rasters into normalised patch sets.
/// Inputs are hole-filled first; the height scale comes from training inputs
/// only.
pub fn prepare(pairs: &[(Raster, Raster)], cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    if pairs.is_empty() {
        return Err(Error::UnrecoverableInput("no rasters to prepare".into()));
    }
    let p = cfg.patch_size;
    let mut train = PatchSet::new(Role::Train, p);
    let mut val = PatchSet::new(Role::Val, p);
    let mut test = PatchSet::new(Role::Test, p);
    let mut regions = Vec::new();

    let n = pairs.len();
    let round = |f: f64| ((f * n as f64).round() as usize).max(if f > 0.0 { 1 } else { 0 });
    let (n_test, n_val) = (round(cfg.test_frac), round(cfg.val_frac));
    if cfg.split == SplitMode::Scenes && n_test + n_val >= n {
        return Err(Error::RegionTooSmall(format!(
            "{n} scenes cannot hold {n_val} validation and {n_test} test scenes plus training"
        )));
    }

    for (i, (input, truth)) in pairs.iter().enumerate() {
        let filled = fill_holes(input)?;
        let s = derive_seed(seed, i as u64);
        let (h, w) = (input.height(), input.width());
        match cfg.split {
            SplitMode::Regions => {
                let split = split_regions(h, w, p, cfg.val_frac, cfg.test_frac)?;
                train.extend(sample_patches(
                    &filled,
                    truth,
                    split.train,
                    Role::Train,
                    cfg.train_patches,
                    p,
                    s,
                )?)?;
                regions.push((i, Role::Train, split.train));
                if let Some(r) = split.val {
                    val.extend(sample_patches(&filled, truth, r, Role::Val, 0, p, s)?)?;
                    regions.push((i, Role::Val, r));
                }
                if let Some(r) = split.test {
                    test.extend(sample_patches(&filled, truth, r, Role::Test, 0, p, s)?)?;
                    regions.push((i, Role::Test, r));
                }
            }
            SplitMode::Scenes => {
                let role = if i >= n - n_test {
                    Role::Test
                } else if i >= n - n_test - n_val {
                    Role::Val
                } else {
                    Role::Train
                };
                let region = Region {
                    row: 0,
                    col: 0,
                    height: h,
                    width: w,
                };
                // Whole scenes are tiled on a grid whatever their role.
                let mut set = sample_patches(&filled, truth, region, Role::Val, 0, p, s)?;
                set.role = role;
                regions.push((i, role, region));
                match role {
                    Role::Train => train.extend(set)?,
                    Role::Val => val.extend(set)?,
                    Role::Test => test.extend(set)?,
                }
            }
        }
    }

    let before = train.len();
    train.patches.retain(|p| p.target.iter().all(|v| v.is_finite()));
    let dropped = before - train.len();
    if train.is_empty() {
        return Err(Error::UnrecoverableInput(
            "no training patch has complete ground truth".into(),
        ));
    }
    let stats = NormStats::from_patches(train.patches.iter().map(|p| p.input.as_slice()))?;
    train.normalize(&stats)?;
    val.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok(Dataset {
        train,
        val,
        test,
        stats,
        regions,
        dropped,
    })
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.write(&dir.join(TRAIN_FILE))?;
        self.val.write(&dir.join(VAL_FILE))?;
        self.test.write(&dir.join(TEST_FILE))?;
        let mut s = format!("global_std={}\n", self.stats.global_std);
        for (i, role, r) in &self.regions {
            let _ = writeln!(
                s,
                "region.{i}.{}={},{},{},{}",
                role.name(),
                r.row,
                r.col,
                r.height,
                r.width
            );
        }
        let p = dir.join(NORM_FILE);
        fs::write(&p, s).map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(NORM_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut std = None;
        let mut regions = Vec::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                continue;
            };
            if k == "global_std" {
                std = Some(v.parse::<f64>().map_err(|_| Error::format(&p, "bad global_std"))?);
            } else if let Some(rest) = k.strip_prefix("region.") {
                let bad = || Error::format(&p, format!("bad region line {line:?}"));
                let (i, role) = rest.split_once('.').ok_or_else(bad)?;
                let role = match role {
                    "train" => Role::Train,
                    "val" => Role::Val,
                    "test" => Role::Test,
                    _ => return Err(bad()),
                };
                let f: Vec<usize> = v
                    .split(',')
                    .map(|x| x.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                let [row, col, height, width] = f[..] else {
                    return Err(bad());
                };
                regions.push((
                    i.parse().map_err(|_| bad())?,
                    role,
                    Region {
                        row,
                        col,
                        height,
                        width,
                    },
                ));
            }
        }
        let stats = NormStats::new(std.ok_or_else(|| Error::format(&p, "missing global_std"))?)?;
        Ok(Self {
            train: PatchSet::read(&dir.join(TRAIN_FILE))?,
            val: PatchSet::read(&dir.join(VAL_FILE))?,
            test: PatchSet::read(&dir.join(TEST_FILE))?,
            stats,
            regions,
            dropped: 0,
        })
    }
}
