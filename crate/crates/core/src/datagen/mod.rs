//! Dataset synthesis, manifest I/O and ground-truth extraction.

mod generator;
mod manifest;
mod synth;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;

pub use generator::{generate, output_name, plan_for, record_stream, sample_plan, GenerateOutput, GeneratorConfig, Reject};
pub use manifest::{
    ground_truth_matrix, load_manifest, write_manifest, AppliedDistortion, Manifest, ManifestHeader, ManifestRecord,
    MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use synth::{procedural_source, write_procedural_sources};

use crate::digest::sha256_parts;
use crate::imaging::RandomStream;

/// Record indices partitioned by source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 split by source id; every variant of a source lands in the same
/// part. The source order is shuffled with a stream derived from `seed`.
pub fn split_by_source(records: &[ManifestRecord], seed: u64) -> DataSplit {
    let mut sources: Vec<&str> = records
        .iter()
        .map(|r| r.source_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let key = sha256_parts([b"attriqa/split".as_slice(), &seed.to_le_bytes()]);
    sources.shuffle(&mut RandomStream::from_seed(key));
    let n = sources.len();
    let n_test = if n >= 3 { (n / 10).max(1) } else { 0 };
    let n_val = if n >= 3 { (n / 10).max(1) } else { 0 };
    let n_train = n - n_test - n_val;
    let position: HashMap<&str, usize> = sources.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let part_of = |id: &str| -> usize {
        let pos = position[id];
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    let mut split = DataSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, r) in records.iter().enumerate() {
        match part_of(&r.source_id) {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    split
}
