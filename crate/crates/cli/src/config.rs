//! Run configuration: one TOML file with a section per command.
//!
//! Relative paths resolve against the data root (`--data-root`, then
//! `ATTRIQA_DATA_ROOT`, then the `data_root` key, then the config file's
//! directory).

use std::path::{Path, PathBuf};

use attriqa::attribute_model::{ModelConfig, TrainSchedule};
use attriqa::imaging::DistortionType;
use attriqa::regressor::{RegressorConfig, RegressorSchedule};
use attriqa::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the by-source train/val/test partition shared by every command.
    #[serde(default)]
    pub split_seed: u64,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub registry: RegistrySection,
    #[serde(default)]
    pub train_dist: TrainDistSection,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub train_reg: TrainRegSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub saliency: SaliencySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// Directory of pristine PNG sources. Ignored when `procedural > 0`.
    pub sources: Option<PathBuf>,
    /// Number of procedural sources to synthesize instead.
    pub procedural: u32,
    pub procedural_size: usize,
    pub distortions: Vec<DistortionType>,
    pub repeats: u32,
    pub level_count: u8,
    pub synthetic_scores: bool,
    pub out: PathBuf,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            sources: None,
            procedural: 0,
            procedural_size: 64,
            distortions: vec![
                DistortionType::GaussianBlur,
                DistortionType::ImpulseNoise,
                DistortionType::ContrastScale,
            ],
            repeats: 10,
            level_count: 5,
            synthetic_scores: true,
            out: "data".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrySection {
    /// Attribute text file; the built-in file when absent.
    pub attributes: Option<PathBuf>,
    /// Distortions to keep; those of `manifest` when empty.
    pub distortions: Vec<DistortionType>,
    pub manifest: PathBuf,
    /// Imported embedding table; toy hashed embeddings when absent.
    pub embeddings: Option<PathBuf>,
    pub toy_dim: usize,
    pub out: PathBuf,
}

impl Default for RegistrySection {
    fn default() -> Self {
        Self {
            attributes: None,
            distortions: Vec::new(),
            manifest: "data/manifest.jsonl".into(),
            embeddings: None,
            toy_dim: 64,
            out: "registry".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainDistSection {
    pub manifest: PathBuf,
    pub registry: PathBuf,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub out: PathBuf,
}

impl Default for TrainDistSection {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            registry: "registry/registry.json".into(),
            model: ModelConfig::default(),
            schedule: TrainSchedule::prompt_tuning(),
            out: "dist".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub manifest: PathBuf,
    pub registry: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            registry: "registry/registry.json".into(),
            checkpoint: "dist/model.ckpt".into(),
            out: "extract".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRegSection {
    pub manifest: PathBuf,
    pub probabilities: PathBuf,
    pub scores: PathBuf,
    pub model: RegressorConfig,
    pub schedule: RegressorSchedule,
    pub out: PathBuf,
}

impl Default for TrainRegSection {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            probabilities: "extract/probabilities.csv".into(),
            scores: "data/scores.csv".into(),
            model: RegressorConfig::default(),
            schedule: RegressorSchedule::default(),
            out: "reg".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub manifest: PathBuf,
    pub registry: PathBuf,
    /// Distortion model; needed for distortion metrics unless `predictions`
    /// is given.
    pub checkpoint: Option<PathBuf>,
    /// Precomputed strength predictions (`record_id,<distortion>,...`).
    pub predictions: Option<PathBuf>,
    /// Probability table and regressor for score metrics.
    pub probabilities: Option<PathBuf>,
    pub regressor: Option<PathBuf>,
    pub scores: PathBuf,
    pub split: SplitPart,
    pub levels: u32,
    pub out: PathBuf,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            registry: "registry/registry.json".into(),
            checkpoint: None,
            predictions: None,
            probabilities: None,
            regressor: None,
            scores: "data/scores.csv".into(),
            split: SplitPart::Test,
            levels: 5,
            out: "eval".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySection {
    pub manifest: PathBuf,
    pub registry: PathBuf,
    pub checkpoint: PathBuf,
    /// Maps are drawn for these distortions; every model distortion when empty.
    pub distortions: Vec<DistortionType>,
    pub split: SplitPart,
    /// At most this many images (0 = all).
    pub limit: usize,
    pub sigma: f64,
    pub blend: f64,
    pub out: PathBuf,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            registry: "registry/registry.json".into(),
            checkpoint: "dist/model.ckpt".into(),
            distortions: Vec::new(),
            split: SplitPart::Test,
            limit: 8,
            sigma: 1.0,
            blend: 0.6,
            out: "saliency".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Resolves relative paths against a root directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}
