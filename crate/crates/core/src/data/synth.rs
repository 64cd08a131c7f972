//! Procedural sharp scenes for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blur::{synthesize_blur, BlurSpec};
use super::{Domain, ImageSample, ScenePair};
use crate::error::Result;
use crate::feature_map::FeatureMap;

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A 3-channel scene: linear gradient background, flat rectangles and thin
/// polyline strokes. Values lie in `[0, 1]`.
pub fn procedural_image(size: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let (sin, cos) = rng.random_range(0.0..std::f32::consts::TAU).sin_cos();
    let n = size as f32;
    let mut img = FeatureMap::from_fn(size, size, 3, |y, x, c| {
        let t = ((x as f32 / n - 0.5) * cos + (y as f32 / n - 0.5) * sin + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - t) + c1[c] * t
    });

    for _ in 0..rng.random_range(3..=7) {
        let color = random_color(rng);
        let h = rng.random_range(size / 8..=size / 2);
        let w = rng.random_range(size / 8..=size / 2);
        let top = rng.random_range(0..size - h);
        let left = rng.random_range(0..size - w);
        for y in top..top + h {
            for x in left..left + w {
                for (c, v) in color.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }

    for _ in 0..rng.random_range(2..=4) {
        let color = random_color(rng);
        let thickness = rng.random_range(1..=2) as f32;
        let mut p = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        for _ in 0..rng.random_range(2..=5) {
            let q = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            draw_segment(&mut img, p, q, thickness, color);
            p = q;
        }
    }
    img
}

fn draw_segment(img: &mut FeatureMap, p: (f32, f32), q: (f32, f32), thickness: f32, color: [f32; 3]) {
    let (h, w, _) = img.shape();
    let len = ((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    let r = (thickness / 2.0).ceil() as isize;
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let cy = p.0 + (q.0 - p.0) * t;
        let cx = p.1 + (q.1 - p.1) * t;
        for dy in -r..=r {
            for dx in -r..=r {
                let y = (cy.round() as isize) + dy;
                let x = (cx.round() as isize) + dx;
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                if ((dy * dy + dx * dx) as f32).sqrt() <= thickness / 2.0 {
                    for (c, v) in color.iter().enumerate() {
                        img.set(y as usize, x as usize, c, *v);
                    }
                }
            }
        }
    }
}

/// `count` sharp/blurry pairs, one per scene, ids `scene_0000`, `scene_0001`, ...
pub fn synthetic_pairs(count: usize, size: usize, spec: &BlurSpec, seed: u64) -> Result<Vec<ScenePair>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let sharp = ImageSample {
            pixels: procedural_image(size, &mut rng),
            scene_id: format!("scene_{i:04}"),
            domain: Domain::Sharp,
        };
        let blurry = synthesize_blur(&sharp, spec, rng.random())?;
        pairs.push(ScenePair { sharp, blurry });
    }
    Ok(pairs)
}
