//! Image container, PNG I/O and the distortion kernel bank.

mod distortion;
mod jpeg;
mod kernels;

use std::path::Path;

pub use distortion::{schedule_table, supported_distortions, Category, DistortionType, StrengthLevel};
pub(crate) use kernels::convolve_separable;
pub use kernels::{apply_distortion, apply_sequence, gaussian_kernel, reflect_index, RandomStream};

use crate::error::{Error, Result};

/// Smallest accepted edge length in pixels.
pub const MIN_DIM: usize = 16;

/// H×W×C raster with interleaved channels and values in [0, 1].
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Data(format!("unsupported channel count {channels}")));
        }
        if height < MIN_DIM || width < MIN_DIM {
            return Err(Error::Data(format!(
                "image {height}x{width} is smaller than the {MIN_DIM}x{MIN_DIM} minimum"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                &[height, width, channels],
                &[data.len()],
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from a closure `f(y, x, c)`; values are clamped.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(y, x, c);
                    if !v.is_finite() {
                        return Err(Error::Data(format!("non-finite pixel at ({y}, {x}, {c})")));
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let dynimg = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let gray = matches!(
            dynimg.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        let bytes = if gray {
            dynimg.to_luma8().into_raw()
        } else {
            dynimg.to_rgb8().into_raw()
        };
        let channels = if gray { 1 } else { 3 };
        let data = bytes.into_iter().map(|b| f32::from(b) / 255.0).collect();
        Self::new(h, w, channels, data).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// 8-bit quantized bytes, `round(v * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Center-crops to a square and bilinearly resamples to `size × size`.
    pub fn center_crop_resize(&self, size: usize) -> Result<Self> {
        if self.height == size && self.width == size {
            return Ok(self.clone());
        }
        let side = self.height.min(self.width);
        let oy = (self.height - side) / 2;
        let ox = (self.width - side) / 2;
        let scale = side as f64 / size as f64;
        let sample = |fy: f64, fx: f64, c: usize| -> f32 {
            let y0 = fy.floor().clamp(0.0, (side - 1) as f64);
            let x0 = fx.floor().clamp(0.0, (side - 1) as f64);
            let (y0u, x0u) = (y0 as usize, x0 as usize);
            let y1u = (y0u + 1).min(side - 1);
            let x1u = (x0u + 1).min(side - 1);
            let ty = (fy - y0).clamp(0.0, 1.0);
            let tx = (fx - x0).clamp(0.0, 1.0);
            let p = |y: usize, x: usize| f64::from(self.get(oy + y, ox + x, c));
            let top = p(y0u, x0u) * (1.0 - tx) + p(y0u, x1u) * tx;
            let bot = p(y1u, x0u) * (1.0 - tx) + p(y1u, x1u) * tx;
            (top * (1.0 - ty) + bot * ty) as f32
        };
        Self::from_fn(size, size, self.channels, |y, x, c| {
            let fy = (y as f64 + 0.5) * scale - 0.5;
            let fx = (x as f64 + 0.5) * scale - 0.5;
            sample(fy.max(0.0), fx.max(0.0), c)
        })
    }

    /// Sum of squared 4-neighbour Laplacian responses over interior pixels.
    pub fn laplacian_energy(&self) -> f64 {
        let mut energy = 0.0;
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                for c in 0..self.channels {
                    let lap = f64::from(self.get(y - 1, x, c))
                        + f64::from(self.get(y + 1, x, c))
                        + f64::from(self.get(y, x - 1, c))
                        + f64::from(self.get(y, x + 1, c))
                        - 4.0 * f64::from(self.get(y, x, c));
                    energy += lap * lap;
                }
            }
        }
        energy
    }

    /// Fraction of pixels where any channel differs from `other`.
    pub fn changed_fraction(&self, other: &Image) -> f64 {
        let changed = self
            .data
            .chunks(self.channels)
            .zip(other.data.chunks(other.channels))
            .filter(|(a, b)| a != b)
            .count();
        changed as f64 / (self.height * self.width) as f64
    }

    /// One of the eight rotations/reflections of the square grid:
    /// bit 0 mirrors columns, bit 1 mirrors rows, bit 2 transposes.
    pub fn dihedral(&self, k: u8) -> Image {
        let (h, w, c) = (self.height, self.width, self.channels);
        let transpose = k & 4 != 0;
        let (oh, ow) = if transpose { (w, h) } else { (h, w) };
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..oh {
            for x in 0..ow {
                let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
                if k & 1 != 0 {
                    sx = w - 1 - sx;
                }
                if k & 2 != 0 {
                    sy = h - 1 - sy;
                }
                let at = (sy * w + sx) * c;
                data.extend_from_slice(&self.data[at..at + c]);
            }
        }
        Image::from_raw_unchecked(oh, ow, c, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(
                "crop",
                &[self.height, self.width],
                &[top + height, left + width],
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Image::new(height, width, c, data)
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }
}
