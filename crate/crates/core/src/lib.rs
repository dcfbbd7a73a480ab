//! Kolmogorov-Arnold network layers and a KAN segmentation network for aerial tiles.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod deepkan;
pub mod encoder;
pub mod error;
pub mod glkan;
pub mod kan;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod spline;
pub mod trainer;

pub use kanseg_autograd as autograd;
pub use error::{Error, Result};
