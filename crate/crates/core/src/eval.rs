//! Restoration metrics and dataset evaluation reports.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::io::{load_png, pair_entries, read_manifest, resolve, write_atomic};
use crate::data::ScenePair;
use crate::diffusion::derive_seed;
use crate::error::{shape_err, Error, Result};
use crate::feature_map::FeatureMap;
use crate::train::InferenceModel;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_shapes(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric inputs {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10·log10(peak²/MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &FeatureMap, b: &FeatureMap, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over Gaussian-windowed local statistics
/// (valid positions only), averaged over channels.
pub fn ssim_with(a: &FeatureMap, b: &FeatureMap, p: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, c) = a.shape();
    if h < p.window || w < p.window {
        return Err(shape_err!("image {h}×{w} is smaller than the {}×{} SSIM window", p.window, p.window));
    }
    let k = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |m: &FeatureMap| -> Vec<f64> {
            (0..h * w).map(|i| m.get(i / w, i % w, ch) as f64).collect()
        };
        let (x, y) = (plane(a), plane(b));
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let mxx = filter_valid(&prod(&x, &x), h, w, &k);
        let myy = filter_valid(&prod(&y, &y), h, w, &k);
        let mxy = filter_valid(&prod(&x, &y), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

pub fn ssim(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Scores of the unrestored blurry input against the same reference.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub ssim_params: SsimParams,
    pub psnr_cap: f64,
    /// Sorted by id.
    pub images: Vec<ImageScore>,
    pub skipped: Vec<String>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
    pub mean_input_ssim: f64,
    pub wall_clock_s: f64,
}

impl EvalReport {
    fn build(mut images: Vec<ImageScore>, skipped: Vec<String>, seed: u64, config_digest: String, started: Instant) -> Self {
        images.sort_by(|a, b| a.id.cmp(&b.id));
        let mean = |f: fn(&ImageScore) -> f64| {
            if images.is_empty() {
                0.0
            } else {
                images.iter().map(f).sum::<f64>() / images.len() as f64
            }
        };
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            seed,
            config_digest,
            ssim_params: SsimParams::default(),
            psnr_cap: PSNR_CAP,
            mean_psnr: mean(|s| s.psnr),
            mean_ssim: mean(|s| s.ssim),
            mean_input_psnr: mean(|s| s.input_psnr),
            mean_input_ssim: mean(|s| s.input_ssim),
            images,
            skipped,
            wall_clock_s: started.elapsed().as_secs_f64(),
        }
    }

    pub fn skipped_fraction(&self) -> f64 {
        let n = self.images.len() + self.skipped.len();
        if n == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / n as f64
        }
    }

    /// Median over images of restored PSNR minus input PSNR.
    pub fn median_psnr_gain(&self) -> f64 {
        let mut g: Vec<f64> = self.images.iter().map(|s| s.psnr - s.input_psnr).collect();
        median(&mut g)
    }

    /// Writes `report.json` and `metrics.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(self)?)?;
        let mut csv = String::from("id,psnr,ssim,input_psnr,input_ssim\n");
        for s in &self.images {
            csv.push_str(&format!("{},{},{},{},{}\n", s.id, s.psnr, s.ssim, s.input_psnr, s.input_ssim));
        }
        write_atomic(&dir.join("metrics.csv"), csv.as_bytes())
    }

    /// Parses and checks a `report.json` document.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Data(format!("report schema {} is not {REPORT_SCHEMA_VERSION}", r.schema_version)));
        }
        for s in &r.images {
            if !(s.psnr >= 0.0 && s.psnr <= PSNR_CAP && (-1.0..=1.0).contains(&s.ssim)) {
                return Err(Error::Data(format!("report entry `{}` is out of range", s.id)));
            }
        }
        Ok(r)
    }
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Per-image sampling seed, independent of evaluation order.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    let h = Sha256::digest(id.as_bytes());
    derive_seed(seed, &[u64::from_le_bytes(h[..8].try_into().unwrap())])
}

fn score(model: &InferenceModel, id: &str, blurry: &FeatureMap, sharp: &FeatureMap, seed: u64) -> Result<ImageScore> {
    let restored = model.restore_image(blurry, image_seed(seed, id))?;
    Ok(ImageScore {
        id: id.to_string(),
        psnr: psnr(&restored, sharp, 1.0)?,
        ssim: ssim(&restored, sharp)?,
        input_psnr: psnr(blurry, sharp, 1.0)?,
        input_ssim: ssim(blurry, sharp)?,
    })
}

/// Scores in-memory pairs.
pub fn eval_pairs(pairs: &[ScenePair], model: &InferenceModel, seed: u64) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let started = Instant::now();
    let images = pairs
        .iter()
        .map(|p| score(model, &p.sharp.scene_id, &p.blurry.pixels, &p.sharp.pixels, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::build(images, vec![], seed, model.config.digest(), started))
}

/// Scores every `(blurry, sharp)` pair of a manifest. Unreadable images are
/// recorded as skipped rather than failing the run.
pub fn eval_dataset(manifest: &Path, model: &InferenceModel, seed: u64) -> Result<EvalReport> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Data(format!("manifest {} is empty", manifest.display())));
    }
    let started = Instant::now();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (scene, s, b) in pair_entries(&entries)? {
        let loaded = load_png(&resolve(manifest, &b)).and_then(|bl| Ok((bl, load_png(&resolve(manifest, &s))?)));
        let id = format!("{scene}:{}", b.path);
        match loaded {
            Ok((blurry, sharp)) => images.push(score(model, &id, &blurry, &sharp, seed)?),
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(id);
            }
        }
    }
    skipped.sort();
    Ok(EvalReport::build(images, skipped, seed, model.config.digest(), started))
}
