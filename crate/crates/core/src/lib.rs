//! Pyramid-sampling HER2 scoring pipeline.
//!
//! The crate is organised bottom-up:
//!
//! * [`imaging`]: raster container, resampling, dihedral augmentation, I/O and
//!   synthetic test data.
//! * [`core_extraction`]: Hough circle detection of tissue cores on a slide.
//! * [`pss`]: seeded Pyramid-Sampling-Set assembly (full-res, half-res and
//!   whole-core patches stacked along channels).
//! * [`classifier`]: the 4-class micro-CNN, weighted cross-entropy training,
//!   external prediction loading and the model container.
//! * [`inference`]: top-k confidence selection and max aggregation.
//! * [`montecarlo`]: repeated (N, k) subsampling of prediction pools.
//! * [`consensus`]: pathologist vote resolution.
//! * [`report`]: confusion matrices, accuracies and KCS histogram reports.

pub mod classifier;
pub mod consensus;
pub mod core_extraction;
pub mod error;
pub mod imaging;
pub mod inference;
pub mod montecarlo;
pub mod pss;
pub mod report;
pub mod rng;
pub mod score;

pub use error::{Error, ErrorKind, Result};
pub use imaging::Raster;
pub use rng::SeededRng;
pub use score::{Her2Score, Vote};
