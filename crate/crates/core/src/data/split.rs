use crate::error::{Error, Result};

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row && row < self.row + self.height && col >= self.col && col < self.col + self.width
    }

    /// True if the `size x size` window at `(row, col)` lies inside.
    pub fn contains_window(&self, row: usize, col: usize, size: usize) -> bool {
        row >= self.row
            && col >= self.col
            && row + size <= self.row + self.height
            && col + size <= self.col + self.width
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }
}

/// Mutually exclusive training, validation and test areas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub train: Region,
    pub val: Option<Region>,
    pub test: Option<Region>,
}

impl Split {
    pub fn regions(&self) -> impl Iterator<Item = Region> + '_ {
        std::iter::once(self.train).chain(self.val).chain(self.test)
    }
}

/// Splits a `height x width` raster into three disjoint rectangles.
///
/// Validation and test areas are placed side by side in a strip along the
/// top edge; their sizes are whole patches, rounded to the nearest patch
/// count that gives the requested share of the raster (at least one patch
/// when the share is non-zero). Training takes the full width below the
/// strip. The strip is made taller, a patch row at a time, when the two
/// areas do not fit side by side.
pub fn split_regions(height: usize, width: usize, patch: usize, val_frac: f64, test_frac: f64) -> Result<Split> {
    if patch == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    for f in [val_frac, test_frac] {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("split fraction {f} outside [0, 1)")));
        }
    }
    if val_frac + test_frac >= 1.0 {
        return Err(Error::Config(
            "validation and test shares leave nothing to train".into(),
        ));
    }
    if height < patch || width < patch {
        return Err(Error::RegionTooSmall(format!(
            "{height}x{width} raster cannot hold a {patch}px patch"
        )));
    }
    let full = Region {
        row: 0,
        col: 0,
        height,
        width,
    };
    if val_frac == 0.0 && test_frac == 0.0 {
        return Ok(Split {
            train: full,
            val: None,
            test: None,
        });
    }

    let tile_area = (patch * patch) as f64;
    let area = (height * width) as f64;
    let tiles = |f: f64| -> usize {
        if f == 0.0 {
            0
        } else {
            ((f * area / tile_area).round() as usize).max(1)
        }
    };
    let (n_val, n_test) = (tiles(val_frac), tiles(test_frac));
    let cols = width / patch;

    for rows in 1..=height / patch {
        let val_cols = n_val.div_ceil(rows);
        let test_cols = n_test.div_ceil(rows);
        if val_cols + test_cols > cols {
            continue;
        }
        let strip = rows * patch;
        if height - strip < patch {
            break;
        }
        let region = |col: usize, c: usize| {
            (c > 0).then_some(Region {
                row: 0,
                col: col * patch,
                height: strip,
                width: c * patch,
            })
        };
        return Ok(Split {
            train: Region {
                row: strip,
                col: 0,
                height: height - strip,
                width,
            },
            val: region(0, val_cols),
            test: region(val_cols, test_cols),
        });
    }
    Err(Error::RegionTooSmall(format!(
        "{height}x{width} raster cannot hold {n_val} validation, {n_test} test and one training patch of {patch}px"
    )))
}
