//! PNG images, JSON-lines manifests and split descriptors on disk.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::SplitDescriptor;
use super::{Domain, ImageSample, ScenePair};
use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;

/// Reads an 8-bit image as RGB in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<FeatureMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    FeatureMap::from_vec(h as usize, w as usize, 3, data)
}

/// Writes a 3-channel map as an 8-bit PNG, quantizing with `round(v·255)`.
pub fn save_png(path: &Path, map: &FeatureMap) -> Result<()> {
    let (h, w, c) = map.shape();
    if c != 3 {
        return Err(Error::Data(format!("cannot save a {c}-channel map as RGB")));
    }
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Data("image buffer size mismatch".into()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// One manifest line. `path` is relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub scene_id: String,
    pub domain_tag: Domain,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn resolve(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Pairs manifest entries by scene: the k-th sharp and k-th blurry entry of a
/// scene form one pair. Unmatched entries are an error.
pub fn pair_entries(entries: &[ManifestEntry]) -> Result<Vec<(String, ManifestEntry, ManifestEntry)>> {
    let mut by_scene: BTreeMap<&str, (Vec<&ManifestEntry>, Vec<&ManifestEntry>)> = BTreeMap::new();
    for e in entries {
        let slot = by_scene.entry(&e.scene_id).or_default();
        match e.domain_tag {
            Domain::Sharp => slot.0.push(e),
            Domain::Blurry => slot.1.push(e),
        }
    }
    let mut pairs = Vec::new();
    for (scene, (sharp, blurry)) in by_scene {
        if sharp.len() != blurry.len() {
            return Err(Error::Data(format!(
                "scene `{scene}` has {} sharp but {} blurry entries",
                sharp.len(),
                blurry.len()
            )));
        }
        for (s, b) in sharp.into_iter().zip(blurry) {
            pairs.push((scene.to_string(), s.clone(), b.clone()));
        }
    }
    Ok(pairs)
}

/// Loads every pair listed in a manifest.
pub fn load_pairs(manifest: &Path) -> Result<Vec<ScenePair>> {
    let entries = read_manifest(manifest)?;
    pair_entries(&entries)?
        .into_iter()
        .map(|(scene, s, b)| {
            let load = |e: &ManifestEntry, domain| -> Result<ImageSample> {
                let sample = ImageSample {
                    pixels: load_png(&resolve(manifest, e))?,
                    scene_id: scene.clone(),
                    domain,
                };
                sample.validate()?;
                Ok(sample)
            };
            Ok(ScenePair {
                sharp: load(&s, Domain::Sharp)?,
                blurry: load(&b, Domain::Blurry)?,
            })
        })
        .collect()
}

/// Writes `sharp/<scene>.png`, `blurry/<scene>.png` and `pairs.jsonl` under `dir`;
/// returns the manifest path.
pub fn write_pairs(dir: &Path, pairs: &[ScenePair]) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(pairs.len() * 2);
    for (i, p) in pairs.iter().enumerate() {
        for sample in [&p.sharp, &p.blurry] {
            let tag = match sample.domain {
                Domain::Sharp => "sharp",
                Domain::Blurry => "blurry",
            };
            let rel = format!("{tag}/{}_{i:05}.png", sample.scene_id);
            save_png(&dir.join(&rel), &sample.pixels)?;
            entries.push(ManifestEntry {
                path: rel,
                scene_id: sample.scene_id.clone(),
                domain_tag: sample.domain,
            });
        }
    }
    let manifest = dir.join("pairs.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

pub fn save_descriptor(path: &Path, desc: &SplitDescriptor) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(desc)?.as_bytes())
}

pub fn load_descriptor(path: &Path) -> Result<SplitDescriptor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
