//! Unpaired training data: synthesis, splitting, patch sampling and I/O.

pub mod blur;
pub mod io;
pub mod sampler;
pub mod split;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;

pub use blur::{blur_with_kernels, synthesize_blur, BlurSpec, Kernel, KernelKind};
pub use sampler::PatchSampler;
pub use split::{split_unpaired, SplitDescriptor, UnpairedSplit};
pub use synth::{procedural_image, synthetic_pairs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Blurry,
    Sharp,
}

/// An RGB image in `[0, 1]` tagged with its scene and domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: FeatureMap,
    pub scene_id: String,
    pub domain: Domain,
}

impl ImageSample {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.channels() != 3 {
            return Err(Error::Data(format!(
                "scene `{}`: expected 3 channels, got {}",
                self.scene_id,
                self.pixels.channels()
            )));
        }
        if !self.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "scene `{}`: pixel values outside [0, 1]",
                self.scene_id
            )));
        }
        Ok(())
    }
}

/// A sharp image and its blurred counterpart from the same scene.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub sharp: ImageSample,
    pub blurry: ImageSample,
}
