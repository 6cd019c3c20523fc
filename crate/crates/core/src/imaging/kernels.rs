//! Distortion kernels. Every kernel is a pure function of the input image,
//! the strength and (for noise kernels) the caller-owned random stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{jpeg, DistortionType, Image, StrengthLevel};
use crate::error::{Error, Result};

/// Per-call random stream. Callers derive one per image and never share it.
pub type RandomStream = ChaCha8Rng;

/// Mirror index into `0..n` without repeating the edge sample, folding
/// periodically so any offset is valid.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

fn to_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| f64::from(v)).collect()
}

/// Separable convolution with reflect padding; `horizontal` and `vertical`
/// are odd-length centred taps (an empty slice skips that pass).
pub(crate) fn convolve_separable(src: &[f64], h: usize, w: usize, c: usize, horizontal: &[f64], vertical: &[f64]) -> Vec<f64> {
    let mut buf = src.to_vec();
    if !horizontal.is_empty() {
        let r = (horizontal.len() / 2) as isize;
        let mut out = vec![0.0; buf.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, t) in horizontal.iter().enumerate() {
                        let sx = reflect_index(x as isize + k as isize - r, w);
                        acc += t * buf[(y * w + sx) * c + ch];
                    }
                    out[(y * w + x) * c + ch] = acc;
                }
            }
        }
        buf = out;
    }
    if !vertical.is_empty() {
        let r = (vertical.len() / 2) as isize;
        let mut out = vec![0.0; buf.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for (k, t) in vertical.iter().enumerate() {
                        let sy = reflect_index(y as isize + k as isize - r, h);
                        acc += t * buf[(sy * w + x) * c + ch];
                    }
                    out[(y * w + x) * c + ch] = acc;
                }
            }
        }
        buf = out;
    }
    buf
}

fn disk_blur(img: &Image, radius: f64) -> Vec<f64> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = radius.floor() as isize;
    let taps: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let norm = 1.0 / taps.len() as f64;
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(dy, dx) in &taps {
                    let sy = reflect_index(y as isize + dy, h);
                    let sx = reflect_index(x as isize + dx, w);
                    acc += f64::from(src[(sy * w + sx) * c + ch]);
                }
                out[(y * w + x) * c + ch] = acc * norm;
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn finish(kernel: &'static str, img: &Image, values: Vec<f64>) -> Result<Image> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::KernelNumerical { kernel });
    }
    let data = values.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Image::from_raw_unchecked(img.height(), img.width(), img.channels(), data))
}

/// Applies one distortion at the given level. Level 0 returns the input
/// unchanged and never touches `rng`.
pub fn apply_distortion(img: &Image, d: DistortionType, s: StrengthLevel, rng: &mut RandomStream) -> Result<Image> {
    if s.level() == 0 {
        return Ok(img.clone());
    }
    let strength = s.strength();
    let p = d.parameter(strength);
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let out = match d {
        DistortionType::GaussianBlur => {
            let taps = gaussian_kernel(p);
            convolve_separable(&to_f64(img), h, w, c, &taps, &taps)
        }
        DistortionType::LensBlur => disk_blur(img, p),
        DistortionType::MotionBlur => {
            let len = p as usize;
            // odd lengths are centred; even lengths lean right by one tap
            let taps = if len % 2 == 1 {
                vec![1.0 / len as f64; len]
            } else {
                let mut t = vec![1.0 / len as f64; len + 1];
                t[0] = 0.0;
                t
            };
            convolve_separable(&to_f64(img), h, w, c, &taps, &[])
        }
        DistortionType::WhiteGaussianNoise => {
            let normal = Normal::new(0.0, p).map_err(|_| Error::KernelNumerical { kernel: d.id() })?;
            img.data()
                .iter()
                .map(|&v| f64::from(v) + normal.sample(rng))
                .collect()
        }
        DistortionType::ImpulseNoise => {
            let mut out = to_f64(img);
            for px in out.chunks_mut(c) {
                if rng.gen::<f64>() < p {
                    let value = if rng.gen::<bool>() { 1.0 } else { 0.0 };
                    px.iter_mut().for_each(|v| *v = value);
                }
            }
            out
        }
        DistortionType::ColorSaturationScale => {
            if c == 1 {
                to_f64(img)
            } else {
                let mut out = Vec::with_capacity(img.data().len());
                for px in img.data().chunks(3) {
                    let (hh, ss, vv) = rgb_to_hsv(f64::from(px[0]), f64::from(px[1]), f64::from(px[2]));
                    let (r, g, b) = hsv_to_rgb(hh, ss * p, vv);
                    out.extend_from_slice(&[r, g, b]);
                }
                out
            }
        }
        DistortionType::BrightnessShift => img.data().iter().map(|&v| f64::from(v) + p).collect(),
        DistortionType::ContrastScale => {
            let data = to_f64(img);
            let mean = data.iter().sum::<f64>() / data.len() as f64;
            data.iter().map(|v| mean + p * (v - mean)).collect()
        }
        DistortionType::JpegQuantization => jpeg::degrade(img.data(), h, w, c, p),
        DistortionType::Pixelate => {
            let block = p as usize;
            let src = to_f64(img);
            let mut out = vec![0.0; src.len()];
            for by in (0..h).step_by(block) {
                for bx in (0..w).step_by(block) {
                    let ys = by..(by + block).min(h);
                    let xs = bx..(bx + block).min(w);
                    let count = (ys.len() * xs.len()) as f64;
                    for ch in 0..c {
                        let mut sum = 0.0;
                        for y in ys.clone() {
                            for x in xs.clone() {
                                sum += src[(y * w + x) * c + ch];
                            }
                        }
                        let mean = sum / count;
                        for y in ys.clone() {
                            for x in xs.clone() {
                                out[(y * w + x) * c + ch] = mean;
                            }
                        }
                    }
                }
            }
            out
        }
    };
    finish(d.id(), img, out)
}

/// Applies kernels left to right. Types must be pairwise distinct.
pub fn apply_sequence(img: &Image, specs: &[(DistortionType, StrengthLevel)], rng: &mut RandomStream) -> Result<Image> {
    if specs.is_empty() {
        return Err(Error::Invariant("distortion sequence is empty".into()));
    }
    for (i, (d, _)) in specs.iter().enumerate() {
        if specs[..i].iter().any(|(other, _)| other == d) {
            return Err(Error::DuplicateDistortion(d.id().to_string()));
        }
    }
    let mut out = img.clone();
    for &(d, s) in specs {
        out = apply_distortion(&out, d, s, rng)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::imaging::supported_distortions;

    fn texture(size: usize, channels: usize) -> Image {
        Image::from_fn(size, size, channels, |y, x, c| {
            let (fy, fx) = (y as f32, x as f32);
            0.5 + 0.2 * (fx * 0.9 + c as f32).sin() * (fy * 0.7).cos() + 0.15 * ((fx + 2.0 * fy) * 0.31).sin()
        })
        .unwrap()
    }

    fn lvl(l: u8) -> StrengthLevel {
        StrengthLevel::new(l).unwrap()
    }

    fn rng(seed: u64) -> RandomStream {
        RandomStream::seed_from_u64(seed)
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(9, 5), 1);
        assert_eq!(reflect_index(-30, 16), 0);
        for i in -100..100 {
            assert!(reflect_index(i, 16) < 16);
        }
    }

    #[test]
    fn level_zero_is_identity_for_every_kernel() {
        let img = texture(32, 3);
        for &d in supported_distortions() {
            assert_eq!(apply_distortion(&img, d, lvl(0), &mut rng(1)).unwrap(), img);
        }
    }

    /// Definitional 2-D convolution with an explicit (2r+1)² Gaussian kernel.
    fn dense_gaussian_oracle(img: &Image, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push(((dy, dx), (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
            }
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let (h, w, c) = (img.height(), img.width(), img.channels());
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &((dy, dx), wt) in &weights {
                        let sy = reflect_index(y as isize + dy, h);
                        let sx = reflect_index(x as isize + dx, w);
                        acc += wt * f64::from(img.get(sy, sx, ch));
                    }
                    out[(y * w + x) * c + ch] = acc / total;
                }
            }
        }
        out
    }

    #[test]
    fn gaussian_blur_matches_dense_oracle_and_smooths() {
        let img = texture(32, 3);
        let out = apply_distortion(&img, DistortionType::GaussianBlur, lvl(5), &mut rng(0)).unwrap();
        let oracle = dense_gaussian_oracle(&img, 5.0);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
        assert!(out.laplacian_energy() < img.laplacian_energy());
    }

    #[test]
    fn impulse_noise_replacement_fraction() {
        let img = texture(64, 3);
        let out = apply_distortion(&img, DistortionType::ImpulseNoise, lvl(3), &mut rng(7)).unwrap();
        let frac = out.changed_fraction(&img);
        assert!((frac - 0.24).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn sequence_order_matters() {
        let img = texture(48, 3);
        let a = [
            (DistortionType::GaussianBlur, lvl(5)),
            (DistortionType::ImpulseNoise, lvl(5)),
        ];
        let b = [a[1], a[0]];
        let x = apply_sequence(&img, &a, &mut rng(3)).unwrap();
        let y = apply_sequence(&img, &b, &mut rng(3)).unwrap();
        assert_ne!(x, y);
    }

    #[test]
    fn sequence_of_one_equals_single_application() {
        let img = texture(32, 3);
        for &d in supported_distortions() {
            let one = apply_sequence(&img, &[(d, lvl(4))], &mut rng(11)).unwrap();
            let direct = apply_distortion(&img, d, lvl(4), &mut rng(11)).unwrap();
            assert_eq!(one, direct, "{d}");
        }
    }

    #[test]
    fn sequence_rejects_duplicates_and_all_zero_is_identity() {
        let img = texture(32, 3);
        let dup = [
            (DistortionType::Pixelate, lvl(1)),
            (DistortionType::Pixelate, lvl(2)),
        ];
        assert!(matches!(
            apply_sequence(&img, &dup, &mut rng(0)),
            Err(Error::DuplicateDistortion(_))
        ));
        let zeros: Vec<_> = supported_distortions().iter().map(|&d| (d, lvl(0))).collect();
        assert_eq!(apply_sequence(&img, &zeros, &mut rng(0)).unwrap(), img);
    }

    #[test]
    fn hsv_round_trip_on_unmodified_pixels() {
        for &(r, g, b) in &[(0.2, 0.5, 0.9), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3), (0.0, 0.0, 0.0), (0.7, 0.9, 0.1)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn saturation_reduces_chroma() {
        let img = texture(32, 3);
        let out = apply_distortion(&img, DistortionType::ColorSaturationScale, lvl(5), &mut rng(0)).unwrap();
        let chroma = |im: &Image| -> f64 {
            im.data()
                .chunks(3)
                .map(|p| f64::from(p[0].max(p[1]).max(p[2]) - p[0].min(p[1]).min(p[2])))
                .sum()
        };
        assert!(chroma(&out) < chroma(&img));
    }

    #[test]
    fn pixelate_blocks_are_constant() {
        let img = texture(32, 1);
        let out = apply_distortion(&img, DistortionType::Pixelate, lvl(5), &mut rng(0)).unwrap();
        // block 16: four constant tiles
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(out.get(y, x, 0), out.get(0, 0, 0));
            }
        }
    }

    #[test]
    fn jpeg_changes_image_more_at_higher_levels() {
        let img = texture(32, 3);
        let err = |l| {
            let out = apply_distortion(&img, DistortionType::JpegQuantization, lvl(l), &mut rng(0)).unwrap();
            out.data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum::<f64>()
        };
        assert!(err(1) < err(5));
    }

    #[test]
    fn gaussian_blur_energy_non_increasing_in_level() {
        let img = texture(64, 3);
        let mut prev = img.laplacian_energy();
        for l in 1..=5 {
            let e = apply_distortion(&img, DistortionType::GaussianBlur, lvl(l), &mut rng(0))
                .unwrap()
                .laplacian_energy();
            assert!(e <= prev, "level {l}: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn impulse_fraction_non_decreasing_in_expectation() {
        let img = texture(64, 3);
        let mut prev = 0.0;
        for l in 1..=5 {
            let mean: f64 = (0..10)
                .map(|seed| {
                    apply_distortion(&img, DistortionType::ImpulseNoise, lvl(l), &mut rng(seed))
                        .unwrap()
                        .changed_fraction(&img)
                })
                .sum::<f64>()
                / 10.0;
            assert!(mean > prev);
            prev = mean;
        }
    }
}
