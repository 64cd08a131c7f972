//! Tensor building blocks shared by every network: parameter storage,
//! layers, custom kernels and the optimizer.

pub mod adam;
pub mod fused;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{ChannelNorm, Conv2d, ConvConfig, Linear, PdConv};
pub use params::{Init, ParamStore, Scope};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Shared invocation counter for auditing which networks a code path touches.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn hit(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}
