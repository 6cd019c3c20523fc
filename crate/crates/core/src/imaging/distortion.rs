use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Blur,
    Noise,
    Color,
    Compression,
    BrightnessContrast,
    Spatial,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::Blur => "blur",
            Category::Noise => "noise",
            Category::Color => "color",
            Category::Compression => "compression",
            Category::BrightnessContrast => "brightness-contrast",
            Category::Spatial => "spatial",
        }
    }
}

/// The supported distortion kernels, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistortionType {
    GaussianBlur,
    LensBlur,
    MotionBlur,
    WhiteGaussianNoise,
    ImpulseNoise,
    ColorSaturationScale,
    BrightnessShift,
    ContrastScale,
    JpegQuantization,
    Pixelate,
}

const ALL: [DistortionType; 10] = [
    DistortionType::GaussianBlur,
    DistortionType::LensBlur,
    DistortionType::MotionBlur,
    DistortionType::WhiteGaussianNoise,
    DistortionType::ImpulseNoise,
    DistortionType::ColorSaturationScale,
    DistortionType::BrightnessShift,
    DistortionType::ContrastScale,
    DistortionType::JpegQuantization,
    DistortionType::Pixelate,
];

pub fn supported_distortions() -> &'static [DistortionType] {
    &ALL
}

impl DistortionType {
    pub fn id(self) -> &'static str {
        match self {
            DistortionType::GaussianBlur => "gaussian_blur",
            DistortionType::LensBlur => "lens_blur",
            DistortionType::MotionBlur => "motion_blur",
            DistortionType::WhiteGaussianNoise => "white_gaussian_noise",
            DistortionType::ImpulseNoise => "impulse_noise",
            DistortionType::ColorSaturationScale => "color_saturation_scale",
            DistortionType::BrightnessShift => "brightness_shift",
            DistortionType::ContrastScale => "contrast_scale",
            DistortionType::JpegQuantization => "jpeg_quantization",
            DistortionType::Pixelate => "pixelate",
        }
    }

    pub fn category(self) -> Category {
        match self {
            DistortionType::GaussianBlur | DistortionType::LensBlur | DistortionType::MotionBlur => {
                Category::Blur
            }
            DistortionType::WhiteGaussianNoise | DistortionType::ImpulseNoise => Category::Noise,
            DistortionType::ColorSaturationScale => Category::Color,
            DistortionType::BrightnessShift | DistortionType::ContrastScale => {
                Category::BrightnessContrast
            }
            DistortionType::JpegQuantization => Category::Compression,
            DistortionType::Pixelate => Category::Spatial,
        }
    }

    /// Whether the kernel draws from the random stream.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            DistortionType::WhiteGaussianNoise | DistortionType::ImpulseNoise
        )
    }

    /// Name of the physical parameter the strength drives.
    pub fn parameter_name(self) -> &'static str {
        match self {
            DistortionType::GaussianBlur => "sigma (px)",
            DistortionType::LensBlur => "disk radius (px)",
            DistortionType::MotionBlur => "horizontal line length (px)",
            DistortionType::WhiteGaussianNoise => "noise std",
            DistortionType::ImpulseNoise => "replacement probability",
            DistortionType::ColorSaturationScale => "HSV saturation factor",
            DistortionType::BrightnessShift => "additive shift",
            DistortionType::ContrastScale => "contrast factor about the mean",
            DistortionType::JpegQuantization => "quantization table scale",
            DistortionType::Pixelate => "block size (px)",
        }
    }

    pub fn parameter_formula(self) -> &'static str {
        match self {
            DistortionType::GaussianBlur => "5 s",
            DistortionType::LensBlur => "5 s",
            DistortionType::MotionBlur => "1 + round(20 s)",
            DistortionType::WhiteGaussianNoise => "0.25 s",
            DistortionType::ImpulseNoise => "0.4 s",
            DistortionType::ColorSaturationScale => "1 - 0.8 s",
            DistortionType::BrightnessShift => "-0.5 s",
            DistortionType::ContrastScale => "1 - 0.8 s",
            DistortionType::JpegQuantization => "1 + 19 s",
            DistortionType::Pixelate => "1 + floor(15 s)",
        }
    }

    /// The s → parameter map. `s` is the continuous strength in [0, 1].
    pub fn parameter(self, s: f64) -> f64 {
        match self {
            DistortionType::GaussianBlur | DistortionType::LensBlur => 5.0 * s,
            DistortionType::MotionBlur => 1.0 + (20.0 * s).round(),
            DistortionType::WhiteGaussianNoise => 0.25 * s,
            DistortionType::ImpulseNoise => 0.4 * s,
            DistortionType::ColorSaturationScale | DistortionType::ContrastScale => 1.0 - 0.8 * s,
            DistortionType::BrightnessShift => -0.5 * s,
            DistortionType::JpegQuantization => 1.0 + 19.0 * s,
            DistortionType::Pixelate => 1.0 + (15.0 * s).floor(),
        }
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for DistortionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL.iter()
            .copied()
            .find(|d| d.id() == s)
            .ok_or_else(|| Error::UnknownDistortion(s.to_string()))
    }
}

impl Serialize for DistortionType {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.id())
    }
}

impl<'de> Deserialize<'de> for DistortionType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Discrete strength level; `level / count` is the continuous strength and
/// level 0 means "not applied".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StrengthLevel {
    level: u8,
    count: u8,
}

impl StrengthLevel {
    pub const DEFAULT_COUNT: u8 = 5;

    pub fn new(level: u8) -> Result<Self> {
        Self::with_count(level, Self::DEFAULT_COUNT)
    }

    pub fn with_count(level: u8, count: u8) -> Result<Self> {
        if count == 0 || level > count {
            return Err(Error::Config(format!(
                "strength level {level} is outside 0..={count}"
            )));
        }
        Ok(Self { level, count })
    }

    pub fn level(self) -> u8 {
        self.level
    }

    pub fn count(self) -> u8 {
        self.count
    }

    pub fn strength(self) -> f64 {
        f64::from(self.level) / f64::from(self.count)
    }
}

/// Human-readable reference table of every kernel's schedule.
pub fn schedule_table() -> String {
    let mut out = String::from(
        "# Distortion schedules\n\n\
         Strength `s = level / 5`; level 0 is the identity for every kernel.\n\n\
         | # | id | category | parameter | formula | L1 | L2 | L3 | L4 | L5 |\n\
         |---|----|----------|-----------|---------|----|----|----|----|----|\n",
    );
    for (i, d) in ALL.iter().enumerate() {
        let values: Vec<String> = (1..=5)
            .map(|l| format!("{:.3}", d.parameter(f64::from(l) / 5.0)))
            .collect();
        out.push_str(&format!(
            "| {} | `{}` | {} | {} | `{}` | {} |\n",
            i,
            d.id(),
            d.category().as_str(),
            d.parameter_name(),
            d.parameter_formula(),
            values.join(" | ")
        ));
    }
    out
}
