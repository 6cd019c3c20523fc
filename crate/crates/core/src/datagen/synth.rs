//! Procedural pristine sources for desk-scale experiments.
//!
//! Each source is a dead-leaves image: flat-coloured disks with radius
//! density proportional to r^-3 occluding one another, which gives the
//! scale-invariant spectrum and hard edges of natural photographs. Pixels
//! are normalized to a fixed mean and spread so contrast and blur are
//! comparable across sources.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};

use crate::digest::sha256_parts;
use crate::error::{Error, Result};
use crate::imaging::{Image, RandomStream};

const TARGET_MEAN: f64 = 0.5;
const TARGET_STD: f64 = 0.16;
const LEAVES_PER_64: usize = 1500;

pub fn procedural_source(seed: u64, index: u32, size: usize) -> Result<Image> {
    let key = sha256_parts([b"attriqa/source".as_slice(), &seed.to_le_bytes(), &index.to_le_bytes()]);
    let mut rng = RandomStream::from_seed(key);
    let s = size as f64;
    let (rmin, rmax) = (1.0f64, s / 2.0);
    let (a, b) = (rmin.powi(-2), rmax.powi(-2));

    let mut raw = vec![0.0f64; size * size * 3];
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    raw.chunks_mut(3).for_each(|px| px.copy_from_slice(&base));
    // painted back to front, so later leaves occlude earlier ones
    for _ in 0..LEAVES_PER_64 * size * size / (64 * 64) {
        // radius density proportional to r^-3 on [rmin, rmax]
        let r = (a - rng.gen::<f64>() * (a - b)).powf(-0.5);
        let (cy, cx) = (rng.gen_range(-r..s + r), rng.gen_range(-r..s + r));
        let luma = rng.gen::<f64>();
        let color: [f64; 3] = std::array::from_fn(|_| luma + 0.3 * rng.gen_range(-1.0..1.0));
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil().max(0.0) as usize).min(size);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil().max(0.0) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2) <= r * r {
                    raw[(y * size + x) * 3..][..3].copy_from_slice(&color);
                }
            }
        }
    }

    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-9);
    let data = raw
        .iter()
        .map(|v| (TARGET_MEAN + TARGET_STD * (v - mean) / std).clamp(0.02, 0.98) as f32)
        .collect();
    Image::new(size, size, 3, data)
}

/// Writes `count` sources as `src_XXXX.png` and returns their paths.
pub fn write_procedural_sources(dir: impl AsRef<Path>, count: u32, seed: u64, size: usize) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("src_{i:04}.png"));
            procedural_source(seed, i, size)?.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_are_deterministic_and_distinct() {
        let a = procedural_source(1, 0, 32).unwrap();
        assert_eq!(a, procedural_source(1, 0, 32).unwrap());
        assert_ne!(a, procedural_source(1, 1, 32).unwrap());
        assert_ne!(a, procedural_source(2, 0, 32).unwrap());
    }

    #[test]
    fn sources_have_texture_and_stay_off_the_rails() {
        let img = procedural_source(9, 3, 64).unwrap();
        assert!(img.laplacian_energy() > 1.0);
        assert!(img.data().iter().all(|&v| (0.02..=0.98).contains(&v)));
    }
}
