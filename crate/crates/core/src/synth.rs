//! Procedural urban height maps and their photogrammetry-like degradation.
//!
//! Clean scenes are smooth terrain plus rectangular buildings (optionally
//! rotated) with flat, gabled or dormered gabled roofs. Degradation adds
//! Gaussian noise, ellipsoidal vegetation blobs with speckled crowns and
//! clustered nodata holes. Every random choice comes from
//! [`SplitMix64`](crate::rng::SplitMix64), so a seed reproduces a scene
//! exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{read_raster, write_raster, Raster};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoofType {
    Flat,
    Gabled,
    GabledWithDormers,
}

impl RoofType {
    pub fn name(self) -> &'static str {
        match self {
            RoofType::Flat => "flat",
            RoofType::Gabled => "gabled",
            RoofType::GabledWithDormers => "dormers",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [RoofType::Flat, RoofType::Gabled, RoofType::GabledWithDormers]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Metres per pixel.
    pub gsd: f64,
    pub building_count: usize,
    /// Footprint side length range, metres.
    pub building_size: (f64, f64),
    /// Eave height above ground, metres.
    pub building_height: (f64, f64),
    /// Ridge rise above the eaves for gabled roofs, metres.
    pub roof_pitch: (f64, f64),
    pub roof_types: Vec<RoofType>,
    /// Allow footprints at arbitrary orientation.
    pub rotated: bool,
    /// Peak-to-peak terrain relief, metres.
    pub terrain_amplitude: f64,
    pub terrain_wavelength: f64,
    pub noise_sigma: f64,
    /// Target fraction of nodata pixels.
    pub hole_rate: f64,
    /// Mean hole radius, pixels.
    pub hole_cluster_size: f64,
    pub vegetation_blob_count: usize,
    pub vegetation_height: (f64, f64),
    /// Crown radius range, metres.
    pub vegetation_radius: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 256,
            height: 256,
            gsd: 0.25,
            building_count: 4,
            building_size: (6.0, 16.0),
            building_height: (3.0, 12.0),
            roof_pitch: (1.0, 4.0),
            roof_types: vec![RoofType::Flat, RoofType::Gabled, RoofType::GabledWithDormers],
            rotated: true,
            terrain_amplitude: 2.0,
            terrain_wavelength: 60.0,
            noise_sigma: 0.3,
            hole_rate: 0.03,
            hole_cluster_size: 3.0,
            vegetation_blob_count: 20,
            vegetation_height: (1.0, 5.0),
            vegetation_radius: (0.75, 2.0),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 >= 0.0 && r.0 <= r.1;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene extent must be positive".into()));
        }
        if !(self.gsd > 0.0 && self.gsd.is_finite()) {
            return Err(Error::Config("gsd must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.hole_rate) {
            return Err(Error::Config("hole_rate must lie in [0, 1]".into()));
        }
        if self.hole_cluster_size.is_nan() || self.hole_cluster_size <= 0.0 {
            return Err(Error::Config("hole_cluster_size must be positive".into()));
        }
        for (name, r) in [
            ("building_size", self.building_size),
            ("building_height", self.building_height),
            ("roof_pitch", self.roof_pitch),
            ("vegetation_height", self.vegetation_height),
            ("vegetation_radius", self.vegetation_radius),
        ] {
            if !range_ok(r) {
                return Err(Error::Config(format!("{name} must be an ordered non-negative range")));
            }
        }
        if self.building_count > 0 && (self.roof_types.is_empty() || self.building_size.0 <= 0.0) {
            return Err(Error::Config("buildings need roof types and a positive size".into()));
        }
        if !(self.terrain_amplitude >= 0.0 && self.terrain_wavelength > 0.0) {
            return Err(Error::Config(
                "terrain amplitude and wavelength must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A placed building, in metric scene coordinates (x to the right along
/// columns, y downwards along rows, pixel `(r, c)` centred at
/// `((c + 0.5) gsd, (r + 0.5) gsd)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Building {
    pub center: (f64, f64),
    /// Half extents along and across the ridge direction.
    pub half_length: f64,
    pub half_width: f64,
    /// Ridge direction, radians.
    pub angle: f64,
    pub base: f64,
    pub eave: f64,
    pub pitch: f64,
    pub roof: RoofType,
    /// Dormer boxes in local `(along, across)` coordinates: centre, half
    /// sizes and top height above the base.
    pub dormers: Vec<Dormer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dormer {
    pub along: f64,
    pub across: f64,
    pub half_along: f64,
    pub half_across: f64,
    pub top: f64,
}

impl Building {
    /// `(along, across)` coordinates relative to the centre.
    pub fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        u.abs() <= self.half_length && v.abs() <= self.half_width
    }

    /// Roof surface height at a point inside the footprint.
    pub fn roof_height(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        let eave = self.base + self.eave;
        match self.roof {
            RoofType::Flat => eave,
            RoofType::Gabled | RoofType::GabledWithDormers => {
                let mut z = eave + self.pitch * (1.0 - v.abs() / self.half_width);
                for d in &self.dormers {
                    if (u - d.along).abs() <= d.half_along && (v - d.across).abs() <= d.half_across {
                        z = z.max(self.base + d.top);
                    }
                }
                z
            }
        }
    }

    fn bounding_radius(&self) -> f64 {
        self.half_length.hypot(self.half_width)
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub raster: Raster,
    pub buildings: Vec<Building>,
}

struct Terrain {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Terrain {
    fn new(spec: &SceneSpec, rng: &mut SplitMix64) -> Self {
        const WAVES: usize = 3;
        let waves = (0..WAVES)
            .map(|_| {
                // Each wave contributes at most amplitude / WAVES peak to peak.
                let amp = 0.5 * spec.terrain_amplitude / WAVES as f64 * rng.range(0.3, 1.0);
                let theta = rng.range(0.0, 2.0 * PI);
                let k = 2.0 * PI / (spec.terrain_wavelength * rng.range(0.7, 1.5));
                let phase = rng.range(0.0, 2.0 * PI);
                (amp, k * theta.cos(), k * theta.sin(), phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(a, kx, ky, p)| a * (kx * x + ky * y + p).sin())
            .sum()
    }
}

pub fn generate_clean(spec: &SceneSpec) -> Result<Raster> {
    generate_scene(spec).map(|s| s.raster)
}

/// Clean scene plus the building list it was rasterised from.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, 0));
    let terrain = Terrain::new(spec, &mut rng);
    let (w, h, gsd) = (spec.width, spec.height, spec.gsd);
    let (extent_x, extent_y) = (w as f64 * gsd, h as f64 * gsd);

    let mut buildings: Vec<Building> = Vec::new();
    let max_attempts = 200 * spec.building_count.max(1);
    let mut attempts = 0;
    while buildings.len() < spec.building_count && attempts < max_attempts {
        attempts += 1;
        let a = rng.range(spec.building_size.0, spec.building_size.1);
        let b = rng.range(spec.building_size.0, spec.building_size.1);
        let (half_length, half_width) = (0.5 * a.max(b), 0.5 * a.min(b));
        let angle = if spec.rotated {
            rng.range(0.0, PI)
        } else if rng.uniform() < 0.5 {
            0.0
        } else {
            0.5 * PI
        };
        let center = (rng.range(0.0, extent_x), rng.range(0.0, extent_y));
        let roof = spec.roof_types[rng.below(spec.roof_types.len() as u64) as usize];
        let eave = rng.range(spec.building_height.0, spec.building_height.1);
        let pitch = match roof {
            RoofType::Flat => 0.0,
            _ => rng.range(spec.roof_pitch.0, spec.roof_pitch.1),
        };
        let mut bld = Building {
            center,
            half_length,
            half_width,
            angle,
            base: terrain.at(center.0, center.1),
            eave,
            pitch,
            roof,
            dormers: Vec::new(),
        };
        // The footprint, with a one-metre gap, must stay inside the scene
        // and clear of earlier buildings.
        let (s, c) = angle.sin_cos();
        let ext_x = half_length * c.abs() + half_width * s.abs() + 1.0;
        let ext_y = half_length * s.abs() + half_width * c.abs() + 1.0;
        if center.0 - ext_x < 0.0
            || center.0 + ext_x > extent_x
            || center.1 - ext_y < 0.0
            || center.1 + ext_y > extent_y
        {
            continue;
        }
        if buildings.iter().any(|o| overlaps(o, &bld, 1.0)) {
            continue;
        }
        if roof == RoofType::GabledWithDormers {
            let n = 1 + rng.below(3) as usize;
            let side = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
            let slot = 2.0 * half_length / n as f64;
            for k in 0..n {
                let half_along = (0.3 * slot).min(1.2);
                let half_across = 0.25 * half_width;
                let across = side * 0.5 * half_width;
                let along = -half_length + slot * (k as f64 + 0.5);
                // Flat dormer tops sit between the eaves and the ridge.
                let top = eave + pitch * rng.range(0.5, 0.8);
                bld.dormers.push(Dormer {
                    along,
                    across,
                    half_along,
                    half_across,
                    top,
                });
            }
        }
        buildings.push(bld);
    }
    if buildings.len() < spec.building_count {
        return Err(Error::Placement {
            placed: buildings.len(),
            requested: spec.building_count,
            attempts,
        });
    }

    let mut raster = Raster::new(w, h, gsd)?;
    for r in 0..h {
        for c in 0..w {
            let (x, y) = ((c as f64 + 0.5) * gsd, (r as f64 + 0.5) * gsd);
            let z = buildings
                .iter()
                .find(|b| b.contains(x, y))
                .map(|b| b.roof_height(x, y))
                .unwrap_or_else(|| terrain.at(x, y));
            raster.set(r, c, z as f32);
        }
    }
    Ok(Scene { raster, buildings })
}

/// Separating-axis test on the two footprints grown by `gap / 2` each.
fn overlaps(a: &Building, b: &Building, gap: f64) -> bool {
    let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
    if d > a.bounding_radius() + b.bounding_radius() + gap {
        return false;
    }
    let axes = |bl: &Building| {
        let (s, c) = bl.angle.sin_cos();
        [(c, s), (-s, c)]
    };
    let project = |bl: &Building, ax: (f64, f64)| {
        let (s, c) = bl.angle.sin_cos();
        let u = (c, s);
        let v = (-s, c);
        let center = bl.center.0 * ax.0 + bl.center.1 * ax.1;
        let r = (bl.half_length + 0.5 * gap) * (u.0 * ax.0 + u.1 * ax.1).abs()
            + (bl.half_width + 0.5 * gap) * (v.0 * ax.0 + v.1 * ax.1).abs();
        (center - r, center + r)
    };
    for ax in axes(a).into_iter().chain(axes(b)) {
        let (a0, a1) = project(a, ax);
        let (b0, b1) = project(b, ax);
        if a1 < b0 || b1 < a0 {
            return false;
        }
    }
    true
}

/// Noise, vegetation and holes on top of a clean scene. Never mutates the
/// input.
pub fn degrade(clean: &Raster, spec: &SceneSpec) -> Result<Raster> {
    spec.validate()?;
    let mut rng = SplitMix64::new(derive_seed(spec.seed, 1));
    let (w, h, gsd) = (clean.width(), clean.height(), clean.gsd);
    let mut z: Vec<f64> = clean.heights().iter().map(|&v| v as f64).collect();

    for _ in 0..spec.vegetation_blob_count {
        let cx = rng.range(0.0, w as f64 * gsd);
        let cy = rng.range(0.0, h as f64 * gsd);
        let rx = rng.range(spec.vegetation_radius.0, spec.vegetation_radius.1);
        let ry = rx * rng.range(0.7, 1.3);
        let top = rng.range(spec.vegetation_height.0, spec.vegetation_height.1);
        let r0 = ((cy - ry) / gsd).floor().max(0.0) as usize;
        let r1 = (((cy + ry) / gsd).ceil() as usize).min(h);
        let c0 = ((cx - rx) / gsd).floor().max(0.0) as usize;
        let c1 = (((cx + rx) / gsd).ceil() as usize).min(w);
        let mut crown = SplitMix64::new(rng.next_u64());
        for r in r0..r1 {
            for c in c0..c1 {
                let dx = ((c as f64 + 0.5) * gsd - cx) / rx;
                let dy = ((r as f64 + 0.5) * gsd - cy) / ry;
                let d2 = dx * dx + dy * dy;
                if d2 < 1.0 {
                    let speckle = 1.0 + 0.25 * (crown.uniform() - 0.5);
                    z[r * w + c] += top * (1.0 - d2).sqrt() * speckle;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        for v in z.iter_mut() {
            *v += spec.noise_sigma * rng.normal();
        }
    }

    let mut out = Raster::from_heights(w, h, gsd, z.iter().map(|&v| v as f32).collect())?;
    out.origin = clean.origin;
    for i in 0..clean.len() {
        if !clean.mask()[i] {
            out.set_nodata(i / w, i % w);
        }
    }

    let target = (spec.hole_rate * (w * h) as f64).round() as usize;
    let mut holes = w * h - out.valid_count();
    let mut guard = 0;
    while holes < target && guard < 1_000_000 {
        guard += 1;
        let cr = rng.range(0.0, h as f64);
        let cc = rng.range(0.0, w as f64);
        let rad = spec.hole_cluster_size * rng.range(0.5, 1.5);
        let r0 = (cr - rad).floor().max(0.0) as usize;
        let r1 = ((cr + rad).ceil() as usize).min(h);
        let c0 = (cc - rad).floor().max(0.0) as usize;
        let c1 = ((cc + rad).ceil() as usize).min(w);
        'disk: for r in r0..r1 {
            for c in c0..c1 {
                let d = ((r as f64 + 0.5 - cr).powi(2) + (c as f64 + 0.5 - cc).powi(2)).sqrt();
                if d <= rad && out.get(r, c).is_some() {
                    out.set_nodata(r, c);
                    holes += 1;
                    if holes >= target {
                        break 'disk;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One (clean, degraded) pair on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub clean: PathBuf,
    pub degraded: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Generates `count` scene pairs into `dir`, pair `i` seeded with
/// `derive_seed(master_seed, i)`, and writes the manifest.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize, master_seed: u64) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = derive_seed(master_seed, i as u64);
        let s = SceneSpec { seed, ..spec.clone() };
        let clean = generate_clean(&s)?;
        let degraded = degrade(&clean, &s)?;
        let e = ManifestEntry {
            seed,
            clean: PathBuf::from(format!("scene_{i:05}_clean.dsmr")),
            degraded: PathBuf::from(format!("scene_{i:05}_degraded.dsmr")),
        };
        write_raster(&clean, &dir.join(&e.clean))?;
        write_raster(&degraded, &dir.join(&e.degraded))?;
        entries.push(e);
    }
    write_manifest(dir, &entries)?;
    Ok(entries)
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("seed\tclean\tdegraded\n");
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            e.seed,
            e.clean.display(),
            e.degraded.display()
        ));
    }
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, s).map_err(|e| Error::io(p, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let [seed, clean, degraded] = f[..] else {
            return Err(Error::format(&p, format!("line {}: expected 3 fields", n + 1)));
        };
        out.push(ManifestEntry {
            seed: seed
                .parse()
                .map_err(|_| Error::format(&p, format!("line {}: bad seed", n + 1)))?,
            clean: clean.into(),
            degraded: degraded.into(),
        });
    }
    Ok(out)
}

/// Loads the (clean, degraded) rasters named by a manifest.
pub fn load_pairs(dir: &Path) -> Result<Vec<(Raster, Raster)>> {
    read_manifest(dir)?
        .into_iter()
        .map(|e| Ok((read_raster(&dir.join(&e.clean))?, read_raster(&dir.join(&e.degraded))?)))
        .collect()
}
