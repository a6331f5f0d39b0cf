use std::fs;
use std::path::Path;

use super::{Dihedral, Raster, Region};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

const PATCH_MAGIC: &[u8; 8] = b"DSMRPAT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        [Role::Train, Role::Val, Role::Test].get(t as usize).copied()
    }
}

/// Global height scale, estimated on training patches only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub global_std: f64,
}

impl NormStats {
    pub fn new(global_std: f64) -> Result<Self> {
        if !(global_std.is_finite() && global_std > 0.0) {
            return Err(Error::Config(format!(
                "global_std must be positive and finite, got {global_std}"
            )));
        }
        Ok(Self { global_std })
    }

    /// Pooled standard deviation of heights around each patch's own mean, so
    /// that the normalised training corpus has unit spread.
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let (mut ss, mut n) = (0.0f64, 0usize);
        for p in patches {
            let mean = mean(p);
            ss += p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
            n += p.len();
        }
        if n == 0 {
            return Err(Error::Config("cannot estimate height scale from no patches".into()));
        }
        Self::new((ss / n as f64).sqrt())
    }
}

fn mean(p: &[f32]) -> f64 {
    p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
}

/// Centres a patch on its mean and divides by the global scale. Returns the
/// normalised values and the centre.
pub fn normalize(patch: &[f32], stats: &NormStats) -> (Vec<f32>, f64) {
    let center = mean(patch);
    (normalize_with_center(patch, center, stats), center)
}

pub fn normalize_with_center(patch: &[f32], center: f64, stats: &NormStats) -> Vec<f32> {
    patch
        .iter()
        .map(|&v| ((v as f64 - center) / stats.global_std) as f32)
        .collect()
}

pub fn denormalize(patch: &[f32], center: f64, stats: &NormStats) -> Vec<f32> {
    patch
        .iter()
        .map(|&v| (v as f64 * stats.global_std + center) as f32)
        .collect()
}

/// An aligned (input, target) pair of square patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    /// Top-left corner in the source raster.
    pub origin: (usize, usize),
    pub augmentation: Dihedral,
    /// Height subtracted from both input and target when normalised.
    pub center: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub role: Role,
    pub patch_size: usize,
    pub normalized: bool,
    pub patches: Vec<Patch>,
}

/// Top-left corners of the patches cut from `region`.
///
/// Training origins are drawn uniformly (overlap allowed), origin `i` using a
/// stream derived from `(seed, i)`. Validation and test regions are tiled by
/// a non-overlapping grid and `count` is ignored.
pub fn patch_origins(region: Region, role: Role, count: usize, patch: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || patch > region.height || patch > region.width {
        return Err(Error::RegionTooSmall(format!(
            "{}x{} region cannot hold a {patch}px patch",
            region.height, region.width
        )));
    }
    match role {
        Role::Train => {
            let rows = (region.height - patch + 1) as u64;
            let cols = (region.width - patch + 1) as u64;
            Ok((0..count as u64)
                .map(|i| {
                    let mut rng = SplitMix64::new(derive_seed(seed, i));
                    let r = rng.below(rows) as usize;
                    let c = rng.below(cols) as usize;
                    (region.row + r, region.col + c)
                })
                .collect())
        }
        Role::Val | Role::Test => {
            let mut out = Vec::new();
            for r in 0..region.height / patch {
                for c in 0..region.width / patch {
                    out.push((region.row + r * patch, region.col + c * patch));
                }
            }
            Ok(out)
        }
    }
}

/// Cuts aligned patches from an (input, target) raster pair. Patches come out
/// un-augmented and un-normalised; target nodata becomes NaN.
pub fn sample_patches(
    input: &Raster,
    target: &Raster,
    region: Region,
    role: Role,
    count: usize,
    patch: usize,
    seed: u64,
) -> Result<PatchSet> {
    if (input.width(), input.height()) != (target.width(), target.height()) {
        return Err(Error::Dimension(format!(
            "input {}x{} and target {}x{} are not aligned",
            input.height(),
            input.width(),
            target.height(),
            target.width()
        )));
    }
    if region.row + region.height > input.height() || region.col + region.width > input.width() {
        return Err(Error::Dimension(format!("{region:?} exceeds the raster")));
    }
    let patches = patch_origins(region, role, count, patch, seed)?
        .into_iter()
        .map(|(r, c)| Patch {
            input: input.window(r, c, patch),
            target: target.window_nan(r, c, patch),
            origin: (r, c),
            augmentation: Dihedral::Identity,
            center: 0.0,
        })
        .collect();
    Ok(PatchSet {
        role,
        patch_size: patch,
        normalized: false,
        patches,
    })
}

impl PatchSet {
    pub fn new(role: Role, patch_size: usize) -> Self {
        Self {
            role,
            patch_size,
            normalized: false,
            patches: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Applies a uniformly drawn symmetry to each patch, patch `i` using a
    /// stream derived from `(seed, i)`.
    pub fn augment_random(&mut self, seed: u64) -> Result<()> {
        let n = self.patch_size;
        for (i, p) in self.patches.iter_mut().enumerate() {
            let mut rng = SplitMix64::new(derive_seed(seed, i as u64));
            let op = Dihedral::ALL[rng.below(8) as usize];
            let (a, b) = op.apply_pair(&p.input, &p.target, n)?;
            p.input = a;
            p.target = b;
            p.augmentation = p.augmentation.then(op);
        }
        Ok(())
    }

    /// Centres every pair on the input patch mean and scales by `stats`.
    pub fn normalize(&mut self, stats: &NormStats) -> Result<()> {
        if self.normalized {
            return Err(Error::Contract("patch set is already normalised".into()));
        }
        for p in &mut self.patches {
            let (x, c) = normalize(&p.input, stats);
            p.target = normalize_with_center(&p.target, c, stats);
            p.input = x;
            p.center = c;
        }
        self.normalized = true;
        Ok(())
    }

    pub fn extend(&mut self, other: PatchSet) -> Result<()> {
        if other.patch_size != self.patch_size || other.normalized != self.normalized {
            return Err(Error::Contract("cannot merge incompatible patch sets".into()));
        }
        self.patches.extend(other.patches);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p2 = self.patch_size * self.patch_size;
        let mut out = Vec::with_capacity(26 + self.len() * (17 + 8 * p2));
        out.extend_from_slice(PATCH_MAGIC);
        out.push(self.role.tag());
        out.push(self.normalized as u8);
        out.extend_from_slice(&(self.patch_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for p in &self.patches {
            out.extend_from_slice(&(p.origin.0 as u32).to_le_bytes());
            out.extend_from_slice(&(p.origin.1 as u32).to_le_bytes());
            out.push(p.augmentation.tag());
            out.extend_from_slice(&p.center.to_le_bytes());
            for v in p.input.iter().chain(&p.target) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 18 || &bytes[..8] != PATCH_MAGIC {
            return Err(Error::format(path, "not a patch set"));
        }
        let role = Role::from_tag(bytes[8]).ok_or_else(|| Error::format(path, "bad role tag"))?;
        let normalized = bytes[9] != 0;
        let patch_size = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let p2 = patch_size * patch_size;
        let rec = 17 + 8 * p2;
        if bytes.len() - 18 != count * rec {
            return Err(Error::payload(
                path,
                format!("{count} patches need {} bytes, found {}", count * rec, bytes.len() - 18),
            ));
        }
        let mut patches = Vec::with_capacity(count);
        for chunk in bytes[18..].chunks_exact(rec) {
            let row = u32::from_le_bytes(chunk[0..4].try_into().unwrap()) as usize;
            let col = u32::from_le_bytes(chunk[4..8].try_into().unwrap()) as usize;
            let augmentation =
                Dihedral::from_tag(chunk[8]).ok_or_else(|| Error::format(path, "bad augmentation tag"))?;
            let center = f64::from_le_bytes(chunk[9..17].try_into().unwrap());
            let vals: Vec<f32> = chunk[17..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            patches.push(Patch {
                input: vals[..p2].to_vec(),
                target: vals[p2..].to_vec(),
                origin: (row, col),
                augmentation,
                center,
            });
        }
        Ok(Self {
            role,
            patch_size,
            normalized,
            patches,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(s: f64) -> NormStats {
        NormStats::new(s).unwrap()
    }

    #[test]
    fn constant_patch_normalises_to_zero() {
        let (z, c) = normalize(&[7.25; 16], &stats(2.0));
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(c, 7.25);
    }

    #[test]
    fn normalisation_round_trip() {
        let p: Vec<f32> = (0..64).map(|i| 400.0 + (i as f32 * 0.37).sin() * 12.0).collect();
        let s = stats(3.7);
        let (z, c) = normalize(&p, &s);
        let back = denormalize(&z, c, &s);
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn bad_stats_rejected() {
        assert!(NormStats::new(0.0).is_err());
        assert!(NormStats::new(f64::NAN).is_err());
    }

    #[test]
    fn grid_tiles_quadrants() {
        let region = Region {
            row: 0,
            col: 0,
            height: 512,
            width: 512,
        };
        let o = patch_origins(region, Role::Test, 99, 256, 1).unwrap();
        assert_eq!(o, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
    }

    #[test]
    fn random_origins_deterministic_and_inside() {
        let region = Region {
            row: 10,
            col: 20,
            height: 100,
            width: 80,
        };
        let a = patch_origins(region, Role::Train, 500, 32, 9).unwrap();
        let b = patch_origins(region, Role::Train, 500, 32, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&(r, c)| region.contains_window(r, c, 32)));
        assert_ne!(a, patch_origins(region, Role::Train, 500, 32, 10).unwrap());
    }

    #[test]
    fn patch_larger_than_region() {
        let region = Region {
            row: 0,
            col: 0,
            height: 10,
            width: 100,
        };
        assert!(matches!(
            patch_origins(region, Role::Train, 1, 16, 0),
            Err(Error::RegionTooSmall(_))
        ));
    }

    #[test]
    fn patch_set_bytes_round_trip() {
        let a = Raster::from_heights(8, 8, 0.1, (0..64).map(|v| v as f32).collect()).unwrap();
        let b = Raster::from_heights(8, 8, 0.1, (0..64).map(|v| -(v as f32)).collect()).unwrap();
        let region = Region {
            row: 0,
            col: 0,
            height: 8,
            width: 8,
        };
        let mut set = sample_patches(&a, &b, region, Role::Train, 5, 4, 3).unwrap();
        set.augment_random(4).unwrap();
        set.normalize(&stats(1.5)).unwrap();
        let back = PatchSet::from_bytes(&set.to_bytes(), Path::new("p")).unwrap();
        assert_eq!(back, set);
    }
}
