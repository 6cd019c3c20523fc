//! Input-gradient saliency of a distortion probability, and heat overlays.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use log::warn;

use crate::attribute_model::DistortionModel;
use crate::diffcore::{Mode, Tape};
use crate::encoder::unpatchify;
use crate::error::{Error, Result};
use crate::imaging::{convolve_separable, gaussian_kernel, reflect_index, DistortionType, Image};

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
    pub distortion: DistortionType,
    pub record_id: String,
    /// Probability of `distortion` for the image.
    pub probability: f64,
    /// Set when the gradient vanished everywhere; `values` are then all zero.
    pub zero_gradient: bool,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(",")).ok();
        }
        String::from_utf8(out).expect("ascii")
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// The map itself as a colour-mapped image.
    pub fn heatmap(&self) -> Result<Image> {
        Image::from_fn(self.height, self.width, 3, |y, x, c| colormap(self.get(y, x))[c])
    }
}

/// Black through red to yellow; the red channel rises strictly with `v`.
pub fn colormap(v: f64) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [v.sqrt() as f32, (v * v) as f32, 0.0]
}

/// Gradient of `P(d | img)` with respect to every pixel (H×W×C, the image's
/// own channel count), together with the probability.
///
/// Images whose sides are not multiples of the patch size are reflect-padded
/// for the forward pass; gradients landing on padding are folded back onto
/// the pixels they were copied from.
pub fn input_gradient(model: &DistortionModel, img: &Image, d: DistortionType) -> Result<(Vec<f64>, f64)> {
    let index = model
        .distortions
        .iter()
        .position(|&x| x == d)
        .ok_or_else(|| Error::Config(format!("distortion {} is not in the model's registry", d.id())))?;
    let p = model.config.vit.patch_size;
    let (h, w) = (img.height(), img.width());
    let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    let src_c = img.channels();
    let cfg_c = model.config.vit.channels;
    let padded = if (ph, pw) == (h, w) {
        img.clone()
    } else {
        Image::from_fn(ph, pw, src_c, |y, x, c| img.get(reflect_index(y as isize, h), reflect_index(x as isize, w), c))?
    };

    let mut tape = Tape::new(&model.params, Mode::Eval);
    let f = model.record(&mut tape, &padded, true)?;
    let target = tape.slice_rows(f.dist_probs, index, index + 1)?;
    let prob = tape.value(target).item();
    tape.backward(target)?;
    let g = tape
        .grad(f.input)
        .ok_or_else(|| Error::GraphState("input gradient was not recorded".into()))?;
    let g = unpatchify(g, ph, pw, p, cfg_c)?;

    // fold padding (and any grey-to-RGB broadcast) back onto source pixels
    let mut out = vec![0.0; h * w * src_c];
    for y in 0..ph {
        let sy = reflect_index(y as isize, h);
        for x in 0..pw {
            let sx = reflect_index(x as isize, w);
            for c in 0..cfg_c {
                out[(sy * w + sx) * src_c + c.min(src_c - 1)] += g[(y * pw + x) * cfg_c + c];
            }
        }
    }
    Ok((out, prob))
}

/// `|∂P(d|I)/∂pixel|`, max over channels, smoothed with a Gaussian of
/// `sigma` pixels (0 skips smoothing), scaled so the maximum is 1.
pub fn saliency_map(
    model: &DistortionModel,
    img: &Image,
    d: DistortionType,
    record_id: &str,
    sigma: f64,
) -> Result<SaliencyMap> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("smoothing sigma {sigma} must be finite and non-negative")));
    }
    let (grad, probability) = input_gradient(model, img, d)?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite input gradient for `{record_id}`")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut values: Vec<f64> = grad
        .chunks(c)
        .map(|px| px.iter().map(|v| v.abs()).fold(0.0, f64::max))
        .collect();
    if sigma > 0.0 {
        let taps = gaussian_kernel(sigma);
        values = convolve_separable(&values, h, w, 1, &taps, &taps);
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let zero_gradient = max == 0.0;
    if zero_gradient {
        warn!("saliency of {} for `{record_id}` is identically zero", d.id());
    } else {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
        distortion: d,
        record_id: record_id.to_string(),
        probability,
        zero_gradient,
    })
}

/// Blends the colour-mapped saliency over `img`, pixel weight `blend · v`.
/// A zero map reproduces the input.
pub fn overlay(img: &Image, map: &SaliencyMap, blend: f64) -> Result<Image> {
    if (img.height(), img.width()) != (map.height, map.width) {
        return Err(Error::shape("overlay", &[img.height(), img.width()], &[map.height, map.width]));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(Error::Config(format!("blend {blend} outside [0, 1]")));
    }
    let c = img.channels();
    Image::from_fn(img.height(), img.width(), 3, |y, x, ch| {
        let v = map.get(y, x);
        let a = (blend * v) as f32;
        let base = img.get(y, x, ch.min(c - 1));
        if a == 0.0 {
            base
        } else {
            (1.0 - a) * base + a * colormap(v)[ch]
        }
    })
}

pub fn render_overlay(img: &Image, map: &SaliencyMap, blend: f64, path: impl AsRef<Path>) -> Result<Image> {
    let out = overlay(img, map, blend)?;
    out.save_png(path)?;
    Ok(out)
}
