//! Volumetric probabilistic segmentation: a 3D probabilistic U-Net with
//! normalizing-flow posteriors, trained on synthetic ambiguous lesions and
//! evaluated with distribution-level metrics.

pub mod cli;
pub mod data;
pub mod distributions;
pub mod error;
pub mod flows;
pub mod metrics;
pub mod networks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
