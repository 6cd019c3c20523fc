//! JSON Lines manifest: one header line, then one record per line.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::DistortionType;
use crate::metrics::StrengthMatrix;

pub const MANIFEST_FORMAT: &str = "attriqa-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppliedDistortion {
    pub distortion: DistortionType,
    pub level: u8,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub source_id: String,
    pub variant_index: u32,
    pub output_path: String,
    /// Applied kernels in application order.
    pub applied: Vec<AppliedDistortion>,
    pub score: Option<f64>,
}

impl ManifestRecord {
    /// Stable identifier `source_id:variant_index` used across artifacts.
    pub fn id(&self) -> String {
        format!("{}:{}", self.source_id, self.variant_index)
    }

    pub fn strength_of(&self, d: DistortionType) -> f64 {
        self.applied
            .iter()
            .find(|a| a.distortion == d)
            .map_or(0.0, |a| a.strength)
    }

    pub fn mean_applied_strength(&self) -> f64 {
        if self.applied.is_empty() {
            return 0.0;
        }
        self.applied.iter().map(|a| a.strength).sum::<f64>() / self.applied.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub creator: String,
    pub master_seed: u64,
    pub repeats: u32,
    pub level_count: u8,
    pub distortions: Vec<DistortionType>,
    /// Source id → SHA-256 of the source file.
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        validate_header(&self.header)?;
        for (i, r) in self.records.iter().enumerate() {
            validate_record(&self.header, r).map_err(|msg| Error::Data(format!("record {i}: {msg}")))?;
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> Result<StrengthMatrix> {
        ground_truth_matrix(&self.records, &self.header.distortions)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header).map_err(|e| Error::Data(e.to_string()))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn validate_header(h: &ManifestHeader) -> Result<()> {
    if h.format != MANIFEST_FORMAT {
        return Err(Error::Data(format!("not a manifest (format `{}`)", h.format)));
    }
    if h.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "manifest version {} is not supported (expected {MANIFEST_VERSION})",
            h.version
        )));
    }
    if h.repeats == 0 || h.level_count == 0 || h.distortions.is_empty() {
        return Err(Error::Data("manifest header needs repeats, level_count and distortions".into()));
    }
    let unique: HashSet<_> = h.distortions.iter().collect();
    if unique.len() != h.distortions.len() {
        return Err(Error::Data("duplicate distortion in manifest header".into()));
    }
    Ok(())
}

fn validate_record(h: &ManifestHeader, r: &ManifestRecord) -> std::result::Result<(), String> {
    if r.applied.is_empty() || r.applied.len() > h.distortions.len() {
        return Err(format!(
            "applied list has {} entries, expected 1..={}",
            r.applied.len(),
            h.distortions.len()
        ));
    }
    if r.variant_index >= h.repeats {
        return Err(format!("variant_index {} >= repeats {}", r.variant_index, h.repeats));
    }
    let mut seen = HashSet::new();
    for a in &r.applied {
        if !seen.insert(a.distortion) {
            return Err(format!("duplicate distortion `{}`", a.distortion));
        }
        if !h.distortions.contains(&a.distortion) {
            return Err(format!("distortion `{}` is not in the header set", a.distortion));
        }
        if a.level == 0 || a.level > h.level_count {
            return Err(format!("level {} outside 1..={}", a.level, h.level_count));
        }
        let expected = f64::from(a.level) / f64::from(h.level_count);
        if (a.strength - expected).abs() > 1e-12 {
            return Err(format!(
                "strength {} does not equal level/{} = {expected}",
                a.strength, h.level_count
            ));
        }
    }
    if let Some(s) = r.score {
        if !(0.0..=1.0).contains(&s) {
            return Err(format!("score {s} outside [0, 1]"));
        }
    }
    Ok(())
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(manifest.to_jsonl()?.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: ManifestHeader = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
        }
        None => return Err(parse_err(1, "empty manifest".into())),
    };
    validate_header(&header).map_err(|e| parse_err(1, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        validate_record(&header, &record).map_err(|msg| parse_err(i + 1, msg))?;
        records.push(record);
    }
    Ok(Manifest { header, records })
}

/// `P(I, d)` for every record and distortion; absent distortions are 0.
pub fn ground_truth_matrix(records: &[ManifestRecord], distortions: &[DistortionType]) -> Result<StrengthMatrix> {
    let mut m = StrengthMatrix::zeros(records.len(), distortions.len());
    for (r, record) in records.iter().enumerate() {
        for a in &record.applied {
            let col = distortions
                .iter()
                .position(|d| *d == a.distortion)
                .ok_or_else(|| Error::Data(format!("distortion `{}` not in the evaluation set", a.distortion)))?;
            m.set(r, col, a.strength);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> ManifestHeader {
        ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            creator: "test".into(),
            master_seed: 1,
            repeats: 10,
            level_count: 5,
            distortions: vec![DistortionType::GaussianBlur, DistortionType::ImpulseNoise],
            inputs: BTreeMap::new(),
        }
    }

    fn record(applied: &[(DistortionType, u8)]) -> ManifestRecord {
        ManifestRecord {
            source_id: "s0".into(),
            variant_index: 0,
            output_path: "images/s0_00.png".into(),
            applied: applied
                .iter()
                .map(|&(d, l)| AppliedDistortion {
                    distortion: d,
                    level: l,
                    strength: f64::from(l) / 5.0,
                })
                .collect(),
            score: Some(0.5),
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = Manifest {
            header: header(),
            records: vec![
                record(&[(DistortionType::GaussianBlur, 3)]),
                record(&[(DistortionType::ImpulseNoise, 1), (DistortionType::GaussianBlur, 5)]),
            ],
        };
        write_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    fn load_str(body: &str) -> Result<Manifest> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let head = serde_json::to_string(&header()).unwrap();
        fs::write(&path, format!("{head}\n{body}\n")).unwrap();
        load_manifest(&path)
    }

    #[test]
    fn rejects_duplicate_ids() {
        let r = record(&[(DistortionType::GaussianBlur, 3), (DistortionType::GaussianBlur, 2)]);
        let err = load_str(&serde_json::to_string(&r).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_strength_off_level() {
        let mut r = record(&[(DistortionType::GaussianBlur, 3)]);
        r.applied[0].strength = 0.5;
        let err = load_str(&serde_json::to_string(&r).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn rejects_unknown_fields_with_line_number() {
        let ok = serde_json::to_string(&record(&[(DistortionType::GaussianBlur, 1)])).unwrap();
        let bad = ok.replacen('{', "{\"extra\":1,", 1);
        let err = load_str(&format!("{ok}\n{bad}")).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("extra"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ground_truth_matrix_fills_absent_with_zero() {
        let set = [DistortionType::GaussianBlur, DistortionType::ImpulseNoise];
        let m = ground_truth_matrix(&[record(&[(DistortionType::GaussianBlur, 3)])], &set).unwrap();
        assert_eq!(m.shape(), (1, 2));
        assert!((m.get(0, 0) - 0.6).abs() < 1e-15);
        assert_eq!(m.get(0, 1), 0.0);
        let narrow = [DistortionType::ImpulseNoise];
        assert!(ground_truth_matrix(&[record(&[(DistortionType::GaussianBlur, 3)])], &narrow).is_err());
    }
}
