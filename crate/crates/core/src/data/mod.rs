//! Raster I/O and the patch pipeline: hole filling, region split, patch
//! sampling, right-angle augmentation and per-patch normalisation.

mod augment;
mod fill;
mod patches;
mod raster;
mod split;

pub use augment::Dihedral;
pub use fill::{fill_holes, fill_holes_with, FillOptions, FillReport};
pub use patches::{
    denormalize, normalize, normalize_with_center, patch_origins, sample_patches, NormStats, Patch, PatchSet, Role,
};
pub use raster::{read_raster, write_ascii, write_binary, write_raster, Raster, RASTER_MAGIC};
pub use split::{split_regions, Region, Split};
