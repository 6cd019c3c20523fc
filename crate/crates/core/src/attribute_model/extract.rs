//! Attribute-probability matrices: extraction from a frozen model and the
//! CSV file they travel in.
//!
//! The file starts with `# key: value` comment lines (format, version and
//! the digests of the inputs), followed by a header `record_id,<d>/<k>,...`
//! and one row per record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::model::DistortionModel;
use super::train::load_at;
use crate::datagen::ManifestRecord;
use crate::error::{Error, Result};
use crate::imaging::DistortionType;

pub const PROBABILITIES_FORMAT: &str = "attriqa-probabilities";
pub const PROBABILITIES_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityTable {
    /// Provenance entries written as comment lines.
    pub meta: BTreeMap<String, String>,
    /// `<distortion>/<k>` names in registry order.
    pub columns: Vec<String>,
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Accepts only attribute-probability column names.
fn check_column(name: &str) -> Result<()> {
    let ok = name.split_once('/').is_some_and(|(d, k)| {
        d.parse::<DistortionType>().is_ok() && !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit())
    });
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "column `{name}` is not an attribute probability (expected `<distortion>/<index>`)"
        )))
    }
}

impl ProbabilityTable {
    pub fn validate(&self) -> Result<()> {
        for c in &self.columns {
            check_column(c)?;
        }
        if self.ids.len() != self.rows.len() {
            return Err(Error::Data(format!("{} ids for {} rows", self.ids.len(), self.rows.len())));
        }
        for (id, row) in self.ids.iter().zip(&self.rows) {
            if row.len() != self.columns.len() {
                return Err(Error::Data(format!("row `{id}` has {} values, expected {}", row.len(), self.columns.len())));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Data(format!("row `{id}` holds {v}, outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut out = Vec::new();
        writeln!(out, "# format: {PROBABILITIES_FORMAT}").ok();
        writeln!(out, "# version: {PROBABILITIES_VERSION}").ok();
        for (k, v) in &self.meta {
            writeln!(out, "# {k}: {v}").ok();
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            let header = std::iter::once("record_id").chain(self.columns.iter().map(String::as_str));
            w.write_record(header).map_err(|e| Error::Data(e.to_string()))?;
            for (id, row) in self.ids.iter().zip(&self.rows) {
                let fields = std::iter::once(id.clone()).chain(row.iter().map(|v| v.to_string()));
                w.write_record(fields).map_err(|e| Error::Data(e.to_string()))?;
            }
            w.flush().map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(String::from_utf8(out).expect("utf-8 csv"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            if let Some((k, v)) = line[1..].split_once(':') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let format = meta.remove("format").unwrap_or_default();
        let version = meta.remove("version").unwrap_or_default();
        if format != PROBABILITIES_FORMAT || version != PROBABILITIES_VERSION.to_string() {
            return Err(Error::Config(format!(
                "{origin}: declares `{format}` v{version}, expected {PROBABILITIES_FORMAT} v{PROBABILITIES_VERSION}"
            )));
        }
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Data(format!("{origin}: {e}")))?.clone();
        if header.get(0) != Some("record_id") {
            return Err(Error::Config(format!("{origin}: first column must be record_id")));
        }
        let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        for c in &columns {
            check_column(c).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        }
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{origin}: {e}")))?;
            let line = rec.position().map_or(i + 2, |p| p.line() as usize);
            ids.push(rec.get(0).unwrap_or_default().to_string());
            let row = rec
                .iter()
                .skip(1)
                .map(|f| {
                    f.parse::<f64>().map_err(|e| Error::Parse {
                        path: origin.to_string(),
                        line,
                        msg: format!("`{f}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let table = Self {
            meta,
            columns,
            ids,
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Rows reordered to follow `ids`; every id must be present.
    pub fn rows_for(&self, ids: &[String]) -> Result<Vec<Vec<f64>>> {
        let index: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.rows[i].clone())
                    .ok_or_else(|| Error::Data(format!("record `{id}` missing from probability table")))
            })
            .collect()
    }
}

/// Attribute probabilities of every record under a frozen model, in record
/// order. Image paths are relative to `root`.
pub fn extract_attribute_probs(
    model: &DistortionModel,
    column_names: &[String],
    records: &[ManifestRecord],
    root: &Path,
) -> Result<ProbabilityTable> {
    if column_names.len() != model.attribute_count() {
        return Err(Error::Config(format!(
            "registry lists {} attributes, model produces {}",
            column_names.len(),
            model.attribute_count()
        )));
    }
    let size = model.config.vit.image_size;
    let rows = records
        .par_iter()
        .map(|r| {
            let img = load_at(&root.join(&r.output_path), size)?;
            Ok(model.predict(&img)?.attr_probs)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = BTreeMap::new();
    meta.insert("registry_digest".to_string(), model.registry_digest.clone());
    Ok(ProbabilityTable {
        meta,
        columns: column_names.to_vec(),
        ids: records.iter().map(ManifestRecord::id).collect(),
        rows,
    })
}
