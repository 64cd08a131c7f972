//! Scene-disjoint unpaired splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample, ScenePair};
use crate::error::{Error, Result};

/// Blurry images from one group of scenes, sharp images from the rest.
#[derive(Debug, Clone)]
pub struct UnpairedSplit {
    pub blurry: Vec<ImageSample>,
    pub sharp: Vec<ImageSample>,
    pub ratio: (f64, f64),
    pub seed: u64,
}

/// On-disk description of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub ratio: (f64, f64),
    pub seed: u64,
    pub blurry_scenes: Vec<String>,
    pub sharp_scenes: Vec<String>,
    pub blurry_count: usize,
    pub sharp_count: usize,
}

impl UnpairedSplit {
    pub fn descriptor(&self) -> SplitDescriptor {
        let scenes = |set: &[ImageSample]| {
            let mut ids: Vec<String> = set.iter().map(|s| s.scene_id.clone()).collect();
            ids.sort();
            ids.dedup();
            ids
        };
        SplitDescriptor {
            ratio: self.ratio,
            seed: self.seed,
            blurry_scenes: scenes(&self.blurry),
            sharp_scenes: scenes(&self.sharp),
            blurry_count: self.blurry.len(),
            sharp_count: self.sharp.len(),
        }
    }
}

fn check_ratio(ratio: (f64, f64)) -> Result<()> {
    let (a, b) = ratio;
    if !(a > 0.0 && b > 0.0 && ((a + b) - 1.0).abs() < 1e-9) {
        return Err(Error::Config(format!(
            "split ratio must be two positive parts summing to 1, got {a}:{b}"
        )));
    }
    Ok(())
}

/// Largest `(nb, ns)` within the available counts with `|nb - per·ns| <= 1`.
fn balanced_sizes(blurry: usize, sharp: usize, per: f64) -> Result<(usize, usize)> {
    for ns in (1..=sharp).rev() {
        let target = per * ns as f64;
        let nb = blurry.min((target + 1.0 + 1e-9).floor() as usize);
        if nb >= 1 && nb as f64 >= target - 1.0 - 1e-9 {
            return Ok((nb, ns));
        }
    }
    Err(Error::Data(format!(
        "cannot balance {blurry} blurry and {sharp} sharp images at ratio {per}"
    )))
}

/// Splits paired data into a blurry-only and a sharp-only subset whose scenes
/// never overlap.
///
/// Scenes are shuffled with `seed`, then handed to the blurry side until it
/// holds `round(ratio.0 · pairs)` images; the remainder go to the sharp side.
/// When scenes hold several pairs the larger side is trimmed so the sizes
/// match the ratio to within one image.
pub fn split_unpaired(pairs: &[ScenePair], ratio: (f64, f64), seed: u64) -> Result<UnpairedSplit> {
    check_ratio(ratio)?;
    let mut scenes: BTreeMap<&str, Vec<&ScenePair>> = BTreeMap::new();
    for p in pairs {
        if p.sharp.scene_id.is_empty() || p.sharp.scene_id != p.blurry.scene_id {
            return Err(Error::Data(format!(
                "pair has inconsistent scene ids `{}` / `{}`",
                p.sharp.scene_id, p.blurry.scene_id
            )));
        }
        scenes.entry(p.sharp.scene_id.as_str()).or_default().push(p);
    }
    if scenes.len() < 2 {
        return Err(Error::Data(format!(
            "{} scene(s) cannot form two disjoint subsets",
            scenes.len()
        )));
    }
    let mut order: Vec<&str> = scenes.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let target = (ratio.0 * pairs.len() as f64).round() as usize;
    let mut blurry_scenes = Vec::new();
    let mut sharp_scenes = Vec::new();
    let mut filled = 0;
    for id in order {
        if filled < target {
            filled += scenes[id].len();
            blurry_scenes.push(id);
        } else {
            sharp_scenes.push(id);
        }
    }
    if sharp_scenes.is_empty() {
        sharp_scenes.extend(blurry_scenes.pop());
    }
    if blurry_scenes.is_empty() {
        blurry_scenes.push(sharp_scenes.remove(0));
    }
    let mut blurry: Vec<ImageSample> = blurry_scenes
        .iter()
        .flat_map(|id| scenes[id].iter().map(|p| p.blurry.clone()))
        .collect();
    let mut sharp: Vec<ImageSample> = sharp_scenes
        .iter()
        .flat_map(|id| scenes[id].iter().map(|p| p.sharp.clone()))
        .collect();

    let (nb, ns) = balanced_sizes(blurry.len(), sharp.len(), ratio.0 / ratio.1)?;
    blurry.truncate(nb);
    sharp.truncate(ns);
    debug_assert!(blurry.iter().all(|s| s.domain == Domain::Blurry));
    Ok(UnpairedSplit {
        blurry,
        sharp,
        ratio,
        seed,
    })
}
