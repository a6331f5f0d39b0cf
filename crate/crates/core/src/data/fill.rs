use super::Raster;
use crate::error::{Error, Result};

/// Laplace interpolation settings.
#[derive(Debug, Clone, Copy)]
pub struct FillOptions {
    /// Stop once no cell changes by more than this many metres in a sweep.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for FillOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_sweeps: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FillReport {
    pub filled: usize,
    pub sweeps: usize,
    pub last_update: f64,
    pub converged: bool,
}

pub fn fill_holes(raster: &Raster) -> Result<Raster> {
    fill_holes_with(raster, FillOptions::default()).map(|(r, _)| r)
}

/// Fills nodata cells with the discrete harmonic interpolant of the valid
/// cells (4-neighbour Laplace equation, reflecting raster borders).
///
/// Holes are first seeded ring by ring from the hole boundary inwards with
/// the mean of already known neighbours, then relaxed by Gauss-Seidel sweeps
/// until the largest change drops below the tolerance. Valid cells are
/// never modified.
pub fn fill_holes_with(raster: &Raster, opts: FillOptions) -> Result<(Raster, FillReport)> {
    let (w, h) = (raster.width(), raster.height());
    let holes: Vec<usize> = (0..raster.len()).filter(|&i| !raster.mask()[i]).collect();
    if holes.is_empty() {
        return Ok((
            raster.clone(),
            FillReport {
                filled: 0,
                sweeps: 0,
                last_update: 0.0,
                converged: true,
            },
        ));
    }
    if holes.len() == raster.len() {
        return Err(Error::UnrecoverableInput(
            "raster holds no valid height to interpolate from".into(),
        ));
    }

    let mut z: Vec<f64> = raster.heights().iter().map(|&v| v as f64).collect();
    let mut known = raster.mask().to_vec();

    let neighbours = |i: usize| {
        let (r, c) = (i / w, i % w);
        let mut n = [usize::MAX; 4];
        if r > 0 {
            n[0] = i - w;
        }
        if r + 1 < h {
            n[1] = i + w;
        }
        if c > 0 {
            n[2] = i - 1;
        }
        if c + 1 < w {
            n[3] = i + 1;
        }
        n
    };

    // Ring-by-ring seeding.
    let mut pending = holes.clone();
    while !pending.is_empty() {
        let mut ring = Vec::new();
        let mut rest = Vec::new();
        for &i in &pending {
            let (mut s, mut k) = (0.0, 0);
            for j in neighbours(i) {
                if j != usize::MAX && known[j] {
                    s += z[j];
                    k += 1;
                }
            }
            if k > 0 {
                ring.push((i, s / k as f64));
            } else {
                rest.push(i);
            }
        }
        for &(i, v) in &ring {
            z[i] = v;
            known[i] = true;
        }
        pending = rest;
    }

    let mut sweeps = 0;
    let mut last_update = f64::INFINITY;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for &i in &holes {
            let (mut s, mut k) = (0.0, 0);
            for j in neighbours(i) {
                if j != usize::MAX {
                    s += z[j];
                    k += 1;
                }
            }
            let v = s / k as f64;
            max_delta = max_delta.max((v - z[i]).abs());
            z[i] = v;
        }
        last_update = max_delta;
        if max_delta < opts.tolerance {
            break;
        }
    }

    let mut out = raster.clone();
    for &i in &holes {
        out.heights_mut()[i] = z[i] as f32;
        out.mask_mut()[i] = true;
    }
    Ok((
        out,
        FillReport {
            filled: holes.len(),
            sweeps,
            last_update,
            converged: last_update < opts.tolerance,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_hole_in_constant_field() {
        let mut r = Raster::from_heights(5, 5, 0.1, vec![4.0; 25]).unwrap();
        r.set_nodata(2, 2);
        let f = fill_holes(&r).unwrap();
        assert!(f.is_complete());
        assert_eq!(f.get(2, 2), Some(4.0));
    }

    #[test]
    fn complete_raster_unchanged() {
        let r = Raster::from_heights(3, 2, 0.1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(fill_holes(&r).unwrap(), r);
    }

    #[test]
    fn all_nodata_is_unrecoverable() {
        let r = Raster::from_heights(2, 2, 0.1, vec![f32::NAN; 4]).unwrap();
        assert!(matches!(fill_holes(&r), Err(Error::UnrecoverableInput(_))));
    }

    #[test]
    fn preserves_valid_cells_and_is_idempotent() {
        let mut r = Raster::from_heights(8, 6, 0.1, (0..48).map(|v| (v * v % 17) as f32).collect()).unwrap();
        for (row, col) in [(0, 0), (2, 3), (2, 4), (3, 3), (5, 7)] {
            r.set_nodata(row, col);
        }
        let f = fill_holes(&r).unwrap();
        for i in 0..r.len() {
            if r.mask()[i] {
                assert_eq!(f.heights()[i], r.heights()[i]);
            }
        }
        assert_eq!(fill_holes(&f).unwrap(), f);
    }
}
