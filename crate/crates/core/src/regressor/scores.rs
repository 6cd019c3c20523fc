//! Raw quality labels and their mapping onto `[0, 1]`, higher meaning better.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    HigherBetter,
    LowerBetter,
}

impl Polarity {
    pub fn id(self) -> &'static str {
        match self {
            Self::HigherBetter => "higher-better",
            Self::LowerBetter => "lower-better",
        }
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher-better" => Ok(Self::HigherBetter),
            "lower-better" => Ok(Self::LowerBetter),
            other => Err(Error::Config(format!("unknown polarity `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreNormalizer {
    pub lo: f64,
    pub hi: f64,
    pub polarity: Polarity,
}

impl ScoreNormalizer {
    pub fn new(lo: f64, hi: f64, polarity: Polarity) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::Config(format!("score range [{lo}, {hi}] is empty")));
        }
        Ok(Self { lo, hi, polarity })
    }

    /// Maps `raw` onto `[0, 1]`. Values outside the declared range are
    /// clamped and reported through the returned flag.
    pub fn normalize(&self, raw: f64) -> (f64, bool) {
        let clamped = raw.clamp(self.lo, self.hi);
        let s = (clamped - self.lo) / (self.hi - self.lo);
        let s = match self.polarity {
            Polarity::HigherBetter => s,
            Polarity::LowerBetter => 1.0 - s,
        };
        (s, clamped != raw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub id: String,
    pub raw: f64,
    pub normalizer: ScoreNormalizer,
}

/// `record_id,raw,lo,hi,polarity` rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoresFile {
    pub entries: Vec<ScoreEntry>,
}

impl ScoresFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| Error::Data(format!("{origin}: {e}")))?.clone();
        if header.iter().collect::<Vec<_>>() != ["record_id", "raw", "lo", "hi", "polarity"] {
            return Err(Error::Config(format!(
                "{origin}: header must be record_id,raw,lo,hi,polarity"
            )));
        }
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{origin}: {e}")))?;
            let line = rec.position().map_or(i + 2, |p| p.line() as usize);
            let bad = |msg: String| Error::Parse {
                path: origin.to_string(),
                line,
                msg,
            };
            let num = |k: usize| -> Result<f64> {
                let f = &rec[k];
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(format!("`{f}` is not a finite number")))
            };
            let polarity = rec[4].parse::<Polarity>().map_err(|e| bad(e.to_string()))?;
            let normalizer = ScoreNormalizer::new(num(2)?, num(3)?, polarity).map_err(|e| bad(e.to_string()))?;
            entries.push(ScoreEntry {
                id: rec[0].to_string(),
                raw: num(1)?,
                normalizer,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(["record_id", "raw", "lo", "hi", "polarity"]).map_err(err)?;
        for e in &self.entries {
            let n = &e.normalizer;
            w.write_record([
                e.id.clone(),
                e.raw.to_string(),
                n.lo.to_string(),
                n.hi.to_string(),
                n.polarity.id().to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Normalized scores in the order of `ids`, with the number of raw
    /// values that had to be clamped.
    pub fn normalized_for(&self, ids: &[String]) -> Result<(Vec<f64>, usize)> {
        let index: std::collections::HashMap<&str, &ScoreEntry> =
            self.entries.iter().map(|e| (e.id.as_str(), e)).collect();
        let mut clamped = 0;
        let out = ids
            .iter()
            .map(|id| {
                let e = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::Data(format!("no score for record `{id}`")))?;
                let (s, c) = e.normalizer.normalize(e.raw);
                clamped += usize::from(c);
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        if clamped > 0 {
            warn!("{clamped} raw scores fell outside their declared range and were clamped");
        }
        Ok((out, clamped))
    }
}
