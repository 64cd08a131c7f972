//! Unpaired image deblurring guided by a diffusion-generated texture prior.
//!
//! The crate covers the full pipeline: synthetic data and unpaired splits,
//! the texture prior encoder, the prior-modulated transformer deblurring
//! network, the conditional diffusion model over the prior, the cycle
//! training objectives, and evaluation.

pub mod checkpoint;
pub mod config;
pub mod cycle;
pub mod data;
pub mod deblur;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod feature_map;
pub mod nn;
pub mod tpe;
pub mod train;

pub use error::{Error, Result};
pub use config::Config;
pub use feature_map::FeatureMap;
