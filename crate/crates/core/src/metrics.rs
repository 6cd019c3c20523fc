//! Evaluation metrics for both halves of the pipeline.
//!
//! Distortion identification is scored with interval accuracy and RMSE over
//! an (images × distortions) strength matrix; quality prediction with Pearson
//! and Spearman correlation against ground-truth scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of strengths, rows = images, columns = distortions.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StrengthMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("StrengthMatrix::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    fn check_congruent(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        Ok(())
    }
}

/// Partition of [0, 1] into bins centred on the discrete strength levels
/// `k / L`, `k = 0..=L`.
///
/// Bins are closed below and open above, except the last which also
/// contains 1 so that the strongest level is scoreable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalScheme {
    levels: u32,
}

impl IntervalScheme {
    pub fn new(levels: u32) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("interval scheme needs at least one level".into()));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Interior boundaries `(2k - 1) / 2L` for `k = 1..=L`.
    pub fn boundaries(&self) -> Vec<f64> {
        let l = f64::from(self.levels);
        (1..=self.levels)
            .map(|k| f64::from(2 * k - 1) / (2.0 * l))
            .collect()
    }

    /// `[lo, hi)` for interior levels; the top level returns `hi = 1` and is
    /// closed on both ends.
    pub fn interval(&self, level: u32) -> (f64, f64) {
        let l = f64::from(self.levels);
        let lo = if level == 0 {
            0.0
        } else {
            f64::from(2 * level - 1) / (2.0 * l)
        };
        let hi = if level >= self.levels {
            1.0
        } else {
            f64::from(2 * level + 1) / (2.0 * l)
        };
        (lo, hi)
    }

    /// Maps a target strength onto its grid level.
    pub fn level_of(&self, target: f64) -> Result<u32> {
        let scaled = target * f64::from(self.levels);
        let k = scaled.round();
        if !(0.0..=f64::from(self.levels)).contains(&k) || (scaled - k).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "target strength {target} is not on the {}-level grid",
                self.levels
            )));
        }
        Ok(k as u32)
    }

    pub fn contains(&self, level: u32, prediction: f64) -> bool {
        let (lo, hi) = self.interval(level);
        if level >= self.levels {
            prediction >= lo && prediction <= hi
        } else {
            prediction >= lo && prediction < hi
        }
    }
}

/// Fraction of cells whose predicted strength falls in the interval centred
/// on the ground-truth level.
pub fn interval_accuracy(
    predicted: &StrengthMatrix,
    target: &StrengthMatrix,
    scheme: IntervalScheme,
) -> Result<f64> {
    predicted.check_congruent(target, "interval_accuracy")?;
    if target.data.is_empty() {
        return Err(Error::DegenerateInput("empty strength matrix".into()));
    }
    let mut hits = 0usize;
    for (&p, &t) in predicted.data.iter().zip(&target.data) {
        let level = scheme.level_of(t)?;
        if scheme.contains(level, p) {
            hits += 1;
        }
    }
    Ok(hits as f64 / target.data.len() as f64)
}

pub fn strength_rmse(predicted: &StrengthMatrix, target: &StrengthMatrix) -> Result<f64> {
    predicted.check_congruent(target, "strength_rmse")?;
    if target.data.is_empty() {
        return Err(Error::DegenerateInput("empty strength matrix".into()));
    }
    let sse: f64 = predicted
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse / target.data.len() as f64).sqrt())
}

/// Pearson linear correlation coefficient, two-pass.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("plcc", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "correlation needs at least 2 samples, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateInput("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Fractional ranks starting at 1; tied values share the mean of their block.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let mean = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = mean;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation: Pearson of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("srcc", &[x.len()], &[y.len()]));
    }
    plcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    pub rmse: Option<f64>,
    pub plcc: Option<f64>,
    pub srcc: Option<f64>,
    /// Images evaluated.
    pub images: usize,
    /// Strength cells evaluated (images × distortions).
    pub cells: usize,
    pub dataset_digest: String,
    pub checkpoint_digest: Option<String>,
}

impl MetricReport {
    pub fn summary(&self) -> String {
        fn fmt(name: &str, v: Option<f64>) -> Option<String> {
            v.map(|v| format!("{name}={v:.4}"))
        }
        let parts: Vec<String> = [
            fmt("accuracy", self.accuracy),
            fmt("rmse", self.rmse),
            fmt("plcc", self.plcc),
            fmt("srcc", self.srcc),
        ]
        .into_iter()
        .flatten()
        .collect();
        format!(
            "{} images={} cells={} dataset={}",
            parts.join(" "),
            self.images,
            self.cells,
            short_digest(&self.dataset_digest)
        )
    }
}

fn short_digest(d: &str) -> &str {
    &d[..d.len().min(12)]
}
