//! Cycle-consistent adversarial training: networks, losses and both stages.

pub mod loss;
pub mod nets;
pub mod wavelet;

pub use loss::{CycleImages, LossWeights};
pub use nets::{PatchDiscriminator, ReblurNet};
