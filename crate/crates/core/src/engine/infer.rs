#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{fill_holes, NormStats, Raster};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Tile placement along both axes of a raster.
#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub row_starts: Vec<usize>,
    pub col_starts: Vec<usize>,
    pub overlap: usize,
}

impl TileLayout {
    /// A tile is `tile` pixels unless the raster is smaller, in which case a
    /// single tile is rounded up to the next multiple of `multiple`. The last
    /// tile may run past the raster; the excess is padded and cropped.
    pub fn new(height: usize, width: usize, tile: usize, overlap: usize, multiple: usize) -> Result<Self> {
        if tile == 0 || !tile.is_multiple_of(multiple) {
            return Err(Error::Config(format!(
                "tile {tile} must be a positive multiple of {multiple}"
            )));
        }
        if 2 * overlap >= tile {
            return Err(Error::Config(format!(
                "overlap {overlap} must be below half the tile ({tile})"
            )));
        }
        let axis = |len: usize| -> (usize, Vec<usize>) {
            if len <= tile {
                return (len.div_ceil(multiple) * multiple, vec![0]);
            }
            let stride = tile - overlap;
            let mut starts = vec![0];
            while starts.last().unwrap() + tile < len {
                starts.push(starts.last().unwrap() + stride);
            }
            (tile, starts)
        };
        let (tile_rows, row_starts) = axis(height);
        let (tile_cols, col_starts) = axis(width);
        Ok(Self {
            tile_rows,
            tile_cols,
            row_starts,
            col_starts,
            overlap,
        })
    }

    pub fn canvas(&self) -> (usize, usize) {
        (
            self.row_starts.last().unwrap() + self.tile_rows,
            self.col_starts.last().unwrap() + self.tile_cols,
        )
    }

    pub fn tiles(&self) -> Vec<(usize, usize)> {
        self.row_starts
            .iter()
            .flat_map(|&r| self.col_starts.iter().map(move |&c| (r, c)))
            .collect()
    }

    /// Linear ramp over the overlap on interior tile edges, 1 elsewhere.
    fn ramp(&self, starts: &[usize], k: usize, i: usize, len: usize) -> f64 {
        let o = self.overlap as f64;
        if self.overlap == 0 {
            return 1.0;
        }
        let mut w: f64 = 1.0;
        if k > 0 {
            w = w.min((i as f64 + 0.5) / o);
        }
        if k + 1 < starts.len() {
            w = w.min((len as f64 - i as f64 - 0.5) / o);
        }
        w
    }
}

/// Metric residual `s · f(x)` for one complete tile of heights in metres.
fn tile_residual(model: &Model<f32>, heights: &[f32], rows: usize, cols: usize, stats: &NormStats) -> Result<Vec<f64>> {
    let center = heights.iter().map(|&v| v as f64).sum::<f64>() / heights.len() as f64;
    let s = stats.global_std;
    let x: Vec<f32> = heights.iter().map(|&v| ((v as f64 - center) / s) as f32).collect();
    let (_, r) = model.forward_residual(&Tensor::new(vec![1, 1, rows, cols], x)?)?;
    Ok(r.data().iter().map(|&v| v as f64 * s).collect())
}

/// Refines a single hole-free tile on its own, exactly as [`infer_tiled`]
/// does for a tile no other tile overlaps.
pub fn refine_tile(
    model: &Model<f32>,
    heights: &[f32],
    rows: usize,
    cols: usize,
    stats: &NormStats,
) -> Result<Vec<f32>> {
    let d = tile_residual(model, heights, rows, cols, stats)?;
    Ok(heights.iter().zip(&d).map(|(&h, &d)| (h as f64 + d) as f32).collect())
}

#[derive(Debug, Clone)]
pub struct InferReport {
    pub raster: Raster,
    pub layout: TileLayout,
    /// Largest spread between tile predictions on a shared pixel, metres.
    pub seam: f64,
}

pub fn infer_tiled(
    model: &Model<f32>,
    raster: &Raster,
    stats: &NormStats,
    tile: usize,
    overlap: usize,
) -> Result<Raster> {
    infer_tiled_report(model, raster, stats, tile, overlap).map(|r| r.raster)
}

/// Fills holes, refines overlapping tiles and blends their residuals with
/// feathered weights. Tiles run in parallel; blending is sequential in tile
/// order, so the output does not depend on scheduling.
pub fn infer_tiled_report(
    model: &Model<f32>,
    raster: &Raster,
    stats: &NormStats,
    tile: usize,
    overlap: usize,
) -> Result<InferReport> {
    let filled = fill_holes(raster)?;
    let (h, w) = (raster.height(), raster.width());
    let layout = TileLayout::new(h, w, tile, overlap, model.config().size_multiple())?;
    let (th, tw) = (layout.tile_rows, layout.tile_cols);
    let src = filled.heights();
    let window = |r0: usize, c0: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(th * tw);
        for r in r0..r0 + th {
            let rr = r.min(h - 1);
            for c in c0..c0 + tw {
                out.push(src[rr * w + c.min(w - 1)]);
            }
        }
        out
    };
    let tiles = layout.tiles();
    let run = |&(r0, c0): &(usize, usize)| tile_residual(model, &window(r0, c0), th, tw, stats);
    #[cfg(feature = "parallel")]
    let residuals: Vec<Result<Vec<f64>>> = tiles.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let residuals: Vec<Result<Vec<f64>>> = tiles.iter().map(run).collect();

    let mut acc = vec![0.0f64; h * w];
    let mut wsum = vec![0.0f64; h * w];
    let mut lo = vec![f64::INFINITY; h * w];
    let mut hi = vec![f64::NEG_INFINITY; h * w];
    let nc = layout.col_starts.len();
    for (k, ((r0, c0), res)) in tiles.iter().zip(residuals).enumerate() {
        let res = res?;
        let (kr, kc) = (k / nc, k % nc);
        for i in 0..th.min(h.saturating_sub(*r0)) {
            let wr = layout.ramp(&layout.row_starts, kr, i, th);
            for j in 0..tw.min(w.saturating_sub(*c0)) {
                let wt = wr * layout.ramp(&layout.col_starts, kc, j, tw);
                let d = res[i * tw + j];
                let p = (r0 + i) * w + c0 + j;
                acc[p] += wt * d;
                wsum[p] += wt;
                lo[p] = lo[p].min(d);
                hi[p] = hi[p].max(d);
            }
        }
    }
    let mut seam = 0.0f64;
    let out: Vec<f32> = (0..h * w)
        .map(|p| {
            seam = seam.max(hi[p] - lo[p]);
            (src[p] as f64 + acc[p] / wsum[p]) as f32
        })
        .collect();
    let mut refined = Raster::from_heights(w, h, raster.gsd, out)?;
    refined.origin = raster.origin;
    Ok(InferReport {
        raster: refined,
        layout,
        seam,
    })
}
