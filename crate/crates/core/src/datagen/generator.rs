//! Multi-distortion dataset synthesis.
//!
//! Every `(source, variant)` pair gets its own random stream keyed by
//! `(master_seed, source_id, variant_index)`. From it the generator draws
//! `K ~ Uniform{1..|D|}`, then `K` distinct distortions in sampled order,
//! each with an independent level in `1..=L`, and finally the noise for the
//! stochastic kernels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{
    write_manifest, AppliedDistortion, Manifest, ManifestHeader, ManifestRecord, MANIFEST_FORMAT, MANIFEST_VERSION,
};
use crate::digest::{file_sha256, sha256_parts};
use crate::error::{Error, Result};
use crate::imaging::{apply_sequence, DistortionType, Image, RandomStream, StrengthLevel};

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub master_seed: u64,
    pub repeats: u32,
    pub distortions: Vec<DistortionType>,
    pub level_count: u8,
    pub sources: Vec<PathBuf>,
    /// Attach `1 - mean applied strength` as each record's score.
    pub synthetic_scores: bool,
}

impl GeneratorConfig {
    pub fn new(sources: Vec<PathBuf>, distortions: Vec<DistortionType>) -> Self {
        Self {
            master_seed: 0,
            repeats: 10,
            distortions,
            level_count: StrengthLevel::DEFAULT_COUNT,
            sources,
            synthetic_scores: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.level_count == 0 {
            return Err(Error::Config("level count must be at least 1".into()));
        }
        if self.distortions.is_empty() {
            return Err(Error::Config("distortion set is empty".into()));
        }
        for (i, d) in self.distortions.iter().enumerate() {
            if self.distortions[..i].contains(d) {
                return Err(Error::DuplicateDistortion(d.id().into()));
            }
        }
        Ok(())
    }
}

/// A source that could not be used, written to the rejects file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub source: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub manifest: Manifest,
    pub rejects: Vec<Reject>,
    pub manifest_path: PathBuf,
}

/// Random stream for one record, independent of every other record.
pub fn record_stream(master_seed: u64, source_id: &str, variant_index: u32) -> RandomStream {
    let seed = sha256_parts([
        b"attriqa/record".as_slice(),
        &master_seed.to_le_bytes(),
        source_id.as_bytes(),
        &variant_index.to_le_bytes(),
    ]);
    RandomStream::from_seed(seed)
}

/// Draws the ordered distortion plan for one record from its stream.
pub fn sample_plan(
    rng: &mut RandomStream,
    distortions: &[DistortionType],
    level_count: u8,
) -> Result<Vec<(DistortionType, StrengthLevel)>> {
    let n = distortions.len();
    let k = rng.gen_range(1..=n);
    let mut pool = distortions.to_vec();
    // partial Fisher-Yates: the first k slots are the sample, in draw order
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.into_iter()
        .map(|d| {
            let level = rng.gen_range(1..=level_count);
            Ok((d, StrengthLevel::with_count(level, level_count)?))
        })
        .collect()
}

/// Plan only, without rendering; identical to what `generate` records.
pub fn plan_for(config: &GeneratorConfig, source_id: &str, variant_index: u32) -> Result<Vec<(DistortionType, StrengthLevel)>> {
    let mut rng = record_stream(config.master_seed, source_id, variant_index);
    sample_plan(&mut rng, &config.distortions, config.level_count)
}

fn source_id(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Config(format!("cannot derive a source id from {}", path.display())))
}

pub fn output_name(source_id: &str, variant_index: u32) -> String {
    format!("images/{source_id}_{variant_index:02}.png")
}

fn render(
    config: &GeneratorConfig,
    source: &Image,
    source_id: &str,
    variant_index: u32,
    out_dir: &Path,
) -> Result<ManifestRecord> {
    let mut rng = record_stream(config.master_seed, source_id, variant_index);
    let plan = sample_plan(&mut rng, &config.distortions, config.level_count)?;
    let img = apply_sequence(source, &plan, &mut rng)?;
    let output_path = output_name(source_id, variant_index);
    img.save_png(out_dir.join(&output_path))?;
    let applied: Vec<AppliedDistortion> = plan
        .iter()
        .map(|&(d, s)| AppliedDistortion {
            distortion: d,
            level: s.level(),
            strength: s.strength(),
        })
        .collect();
    let mut record = ManifestRecord {
        source_id: source_id.to_string(),
        variant_index,
        output_path,
        applied,
        score: None,
    };
    if config.synthetic_scores {
        record.score = Some(1.0 - record.mean_applied_strength());
    }
    Ok(record)
}

/// Renders `repeats × |sources|` images into `out_dir/images/` and writes
/// `manifest.jsonl` plus `rejects.jsonl`. Unreadable sources are skipped
/// with a warning and listed in the rejects file.
pub fn generate(config: &GeneratorConfig, out_dir: impl AsRef<Path>, creator: &str) -> Result<GenerateOutput> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(out_dir, e))?;

    let mut sources: BTreeMap<String, (Image, String)> = BTreeMap::new();
    let mut rejects = Vec::new();
    for path in &config.sources {
        let id = source_id(path)?;
        if sources.contains_key(&id) {
            return Err(Error::Config(format!("duplicate source id `{id}`")));
        }
        match Image::load_png(path).and_then(|img| Ok((img, file_sha256(path)?))) {
            Ok(entry) => {
                sources.insert(id, entry);
            }
            Err(e) => {
                log::warn!("skipping source {}: {e}", path.display());
                rejects.push(Reject {
                    source: path.display().to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let jobs: Vec<(&String, &Image, u32)> = sources
        .iter()
        .flat_map(|(id, (img, _))| (0..config.repeats).map(move |v| (id, img, v)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(id, img, v)| render(config, img, id, v, out_dir))
        .collect::<Result<Vec<_>>>()?;

    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        creator: creator.into(),
        master_seed: config.master_seed,
        repeats: config.repeats,
        level_count: config.level_count,
        distortions: config.distortions.clone(),
        inputs: sources.iter().map(|(id, (_, digest))| (id.clone(), digest.clone())).collect(),
    };
    let manifest = Manifest { header, records };
    let manifest_path = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &manifest_path)?;

    let rejects_path = out_dir.join("rejects.jsonl");
    let mut body = String::new();
    for r in &rejects {
        body.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
        body.push('\n');
    }
    fs::write(&rejects_path, body).map_err(|e| Error::io(&rejects_path, e))?;

    Ok(GenerateOutput {
        manifest,
        rejects,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_respects_bounds_and_distinctness() {
        let set = crate::imaging::supported_distortions().to_vec();
        for v in 0..200 {
            let plan = plan_for(&GeneratorConfig::new(vec![], set.clone()), "src", v).unwrap();
            assert!((1..=set.len()).contains(&plan.len()));
            for (i, (d, s)) in plan.iter().enumerate() {
                assert!(plan[..i].iter().all(|(o, _)| o != d));
                assert!((1..=5).contains(&s.level()));
            }
        }
    }

    #[test]
    fn single_distortion_set_always_has_one_entry() {
        let cfg = GeneratorConfig::new(vec![], vec![DistortionType::Pixelate]);
        for v in 0..50 {
            let plan = plan_for(&cfg, "a", v).unwrap();
            assert_eq!(plan.len(), 1);
            assert_eq!(plan[0].0, DistortionType::Pixelate);
        }
    }

    #[test]
    fn streams_are_keyed_by_source_and_variant() {
        let set = crate::imaging::supported_distortions().to_vec();
        let cfg = GeneratorConfig::new(vec![], set);
        assert_eq!(plan_for(&cfg, "a", 3).unwrap(), plan_for(&cfg, "a", 3).unwrap());
        let differ = (0..20).any(|v| plan_for(&cfg, "a", v).unwrap() != plan_for(&cfg, "b", v).unwrap());
        assert!(differ);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::new(vec![], vec![DistortionType::Pixelate]);
        cfg.repeats = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let dup = GeneratorConfig::new(vec![], vec![DistortionType::Pixelate, DistortionType::Pixelate]);
        assert!(dup.validate().is_err());
    }
}
