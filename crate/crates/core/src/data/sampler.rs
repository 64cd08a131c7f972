//! Deterministic random patch batches.

use std::sync::mpsc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::split::UnpairedSplit;
use super::ImageSample;
use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;

/// Draws independent blurry and sharp patch batches. Batch `i` depends only
/// on `(seed, i)`, so prefetching or skipping ahead never changes the data.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    blurry: Vec<FeatureMap>,
    sharp: Vec<FeatureMap>,
    patch: usize,
    batch: usize,
    flip_prob: f64,
    seed: u64,
}

impl PatchSampler {
    /// `flips` enables random horizontal and vertical flips with probability 0.5 each.
    pub fn new(split: &UnpairedSplit, patch: usize, batch: usize, flips: bool, seed: u64) -> Result<Self> {
        Self::with_flip_prob(split, patch, batch, if flips { 0.5 } else { 0.0 }, seed)
    }

    pub fn with_flip_prob(
        split: &UnpairedSplit,
        patch: usize,
        batch: usize,
        flip_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        if patch == 0 || batch == 0 {
            return Err(Error::Config("patch and batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&flip_prob) {
            return Err(Error::Config(format!("flip probability {flip_prob} outside [0, 1]")));
        }
        if split.blurry.is_empty() || split.sharp.is_empty() {
            return Err(Error::Data("split has an empty subset".into()));
        }
        let take = |set: &[ImageSample]| -> Result<Vec<FeatureMap>> {
            set.iter()
                .map(|s| {
                    let (h, w, _) = s.pixels.shape();
                    if patch > h || patch > w {
                        Err(Error::Data(format!(
                            "patch {patch} exceeds the {h}×{w} image of scene `{}`",
                            s.scene_id
                        )))
                    } else {
                        Ok(s.pixels.clone())
                    }
                })
                .collect()
        };
        Ok(Self {
            blurry: take(&split.blurry)?,
            sharp: take(&split.sharp)?,
            patch,
            batch,
            flip_prob,
            seed,
        })
    }

    fn draw(&self, pool: &[FeatureMap], rng: &mut ChaCha8Rng) -> Result<Vec<FeatureMap>> {
        (0..self.batch)
            .map(|_| {
                let img = &pool[rng.random_range(0..pool.len())];
                let top = rng.random_range(0..=img.height() - self.patch);
                let left = rng.random_range(0..=img.width() - self.patch);
                let mut p = img.crop(top, left, self.patch, self.patch)?;
                if rng.random_bool(self.flip_prob) {
                    p = p.flip_horizontal();
                }
                if rng.random_bool(self.flip_prob) {
                    p = p.flip_vertical();
                }
                Ok(p)
            })
            .collect()
    }

    /// The `index`-th `(blurry, sharp)` batch.
    pub fn batch(&self, index: u64) -> Result<(Vec<FeatureMap>, Vec<FeatureMap>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let blurry = self.draw(&self.blurry, &mut rng)?;
        let sharp = self.draw(&self.sharp, &mut rng)?;
        Ok((blurry, sharp))
    }

    /// Batches `start, start+1, ...` produced on a worker thread, at most
    /// `depth` ahead of the consumer.
    pub fn prefetch(self, start: u64, depth: usize) -> Prefetch {
        let (tx, rx) = mpsc::sync_channel(depth.max(1));
        let worker = thread::spawn(move || {
            let mut i = start;
            loop {
                if tx.send(self.batch(i)).is_err() {
                    break;
                }
                i += 1;
            }
        });
        Prefetch {
            rx: Some(rx),
            worker: Some(worker),
        }
    }
}

type Batch = (Vec<FeatureMap>, Vec<FeatureMap>);

pub struct Prefetch {
    rx: Option<mpsc::Receiver<Result<Batch>>>,
    worker: Option<thread::JoinHandle<()>>,
}

impl Iterator for Prefetch {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.as_ref()?.recv().ok()
    }
}

impl Drop for Prefetch {
    fn drop(&mut self) {
        // closing the channel stops the worker at its next send
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
