//! Correlation-aware mutual learning for semi-supervised 3D segmentation,
//! end to end on the CPU: synthetic volume generation, a tape-based autodiff
//! substrate, dual-branch encoder-decoders with cross-sample attention,
//! prototype-based omni-correlation consistency, training, and evaluation.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod cma;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod occ;
pub mod params;
pub mod trainer;
pub mod volgen;

pub use error::{CamlError, Result};
