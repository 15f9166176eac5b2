//! Blood-cell image classification pipeline: data manifests, adaptive
//! denoising, class-balanced sampling, augmentation, training of an
//! architecture × fold model grid, ensemble inference, out-of-fold
//! evaluation and confident-learning label analysis.

pub mod augment;
pub mod cl;
pub mod dataset;
pub mod denoise;
pub mod error;
pub mod folds;
pub mod image;
pub mod imbalance;
pub mod infer;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod oof;
pub mod registry;

pub use error::{Error, Result};
