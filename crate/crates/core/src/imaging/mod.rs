//! Raster container, resampling, dihedral symmetries, file I/O and the
//! synthetic core/slide generator.

mod dihedral;
mod io;
mod raster;
mod resample;
mod synth;

pub use dihedral::{apply_dihedral, Dihedral};
pub use io::{load_image, save_image};
pub use raster::{Raster, WHITE};
pub use resample::{downsample_2x, downsample_box, resize, resize_to};
pub use synth::{
    background_is_white, brown_signal, generate_synthetic_core, generate_synthetic_wsi, mean_brown_signal,
    CircleTruth, SyntheticCoreSpec, DEFAULT_SCHEDULE,
};
