//! Text-side anchors: a deterministic hashed sentence embedder and a binary
//! import format for externally computed embeddings.
//!
//! Import file layout (little-endian):
//!
//! ```text
//! magic    8 bytes "ATQEMB\0\0"
//! version  u32 (1)
//! dim      u32
//! count    u32
//! entries  count × { u32 len, id bytes, dim × f64 positive, dim × f64 negative }
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"ATQEMB\0\0";
pub const EMBEDDING_VERSION: u32 = 1;

const NEGATORS: [&str; 3] = ["not", "no", "never"];

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Lower-cased alphanumeric tokens. Tokens following a negator are marked
/// as negated up to the end of the sentence, so a sentence and its negation
/// share only the words before the negator.
pub fn tokenize(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut negated = false;
    let mut word = String::new();
    let flush = |word: &mut String, negated: &mut bool, out: &mut Vec<String>| {
        if word.is_empty() {
            return;
        }
        let w = std::mem::take(word);
        if *negated {
            out.push(format!("not_{w}"));
        } else {
            if NEGATORS.contains(&w.as_str()) {
                *negated = true;
            }
            out.push(w);
        }
    };
    for ch in sentence.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut negated, &mut out);
            if matches!(ch, ';' | '.' | '!' | '?') {
                negated = false;
            }
        }
    }
    flush(&mut word, &mut negated, &mut out);
    out
}

/// Hashed bag-of-tokens embedding, L2-normalized. Each token maps to a fixed
/// pseudo-random direction seeded by its FNV-1a hash.
pub fn embed_text_toy(sentence: &str, dim: usize) -> Result<Vec<f64>> {
    let tokens = tokenize(sentence);
    if tokens.is_empty() || dim == 0 {
        return Err(Error::Data(format!("cannot embed `{sentence}` into {dim} dimensions")));
    }
    let mut v = vec![0.0f64; dim];
    for t in &tokens {
        let mut state = fnv1a(t.as_bytes());
        for x in v.iter_mut() {
            let u = (splitmix(&mut state) >> 11) as f64 / (1u64 << 53) as f64;
            *x += 2.0 * u - 1.0;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.into_iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorProvenance {
    Imported,
    ToyHash,
}

impl fmt::Display for AnchorProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorProvenance::Imported => "imported",
            AnchorProvenance::ToyHash => "toy-hash",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub id: String,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Frozen positive/negative text embeddings, one pair per attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextAnchorSet {
    pub dim: usize,
    pub provenance: AnchorProvenance,
    pub pairs: Vec<AnchorPair>,
}

impl TextAnchorSet {
    /// Embeds `(id, positive sentence, negative sentence)` triples with the
    /// hashed embedder.
    pub fn toy<'a>(dim: usize, sentences: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Result<Self> {
        let pairs = sentences
            .into_iter()
            .map(|(id, pos, neg)| {
                Ok(AnchorPair {
                    id: id.to_string(),
                    positive: embed_text_toy(pos, dim)?,
                    negative: embed_text_toy(neg, dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Self {
            dim,
            provenance: AnchorProvenance::ToyHash,
            pairs,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.pairs {
            if p.positive.len() != self.dim || p.negative.len() != self.dim {
                return Err(Error::Config(format!(
                    "anchor `{}` has dims {}/{} but the set declares {}",
                    p.id,
                    p.positive.len(),
                    p.negative.len(),
                    self.dim
                )));
            }
            if !p.positive.iter().chain(&p.negative).all(|v| v.is_finite()) {
                return Err(Error::Numerical(format!("anchor `{}` is not finite", p.id)));
            }
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Config(format!("duplicate anchor id `{}`", p.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&AnchorPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    pub fn to_import_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        for p in &self.pairs {
            out.extend_from_slice(&(p.id.len() as u32).to_le_bytes());
            out.extend_from_slice(p.id.as_bytes());
            for v in p.positive.iter().chain(&p.negative) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses an import file; the result is tagged as imported.
    pub fn from_import_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != EMBEDDING_MAGIC {
            return Err(Error::Data("not an embedding file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Config(format!(
                "embedding file version {version} is not supported (expected {EMBEDDING_VERSION})"
            )));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut pairs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Data(e.to_string()))?;
            let positive = r.f64s(dim)?;
            let negative = r.f64s(dim)?;
            pairs.push(AnchorPair { id, positive, negative });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data("trailing bytes after embedding table".into()));
        }
        let set = Self {
            dim,
            provenance: AnchorProvenance::Imported,
            pairs,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn load_import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_import_bytes(&bytes)
    }

    pub fn save_import(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_import_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated embedding file".into()));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn toy_embedding_is_stable_and_unit() {
        let a = embed_text_toy("There is a softening of details in the photo.", 64).unwrap();
        let b = embed_text_toy("There is a softening of details in the photo.", 64).unwrap();
        assert_eq!(a, b);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-6);
        let c = embed_text_toy("There is a reduction in image clarity.", 64).unwrap();
        assert!(cosine(&a, &c) < 1.0);
        // pinned against platform drift
        assert!((a[0] - embed_text_toy("there IS a softening, of details in the photo", 64).unwrap()[0]).abs() < 1e-15);
        assert!(embed_text_toy("   ", 8).is_err());
    }

    #[test]
    fn negation_scope() {
        assert_eq!(
            tokenize("There is not a blur, in it. Yes"),
            ["there", "is", "not", "not_a", "not_blur", "not_in", "not_it", "yes"]
        );
    }

    #[test]
    fn import_round_trip_and_version() {
        let set = TextAnchorSet::toy(8, [("a/0", "There is x.", "There is not x."), ("a/1", "There is y.", "There is not y.")]).unwrap();
        let back = TextAnchorSet::from_import_bytes(&set.to_import_bytes()).unwrap();
        assert_eq!(back.pairs, set.pairs);
        assert_eq!(back.provenance, AnchorProvenance::Imported);
        let mut bytes = set.to_import_bytes();
        bytes[8] = 7;
        assert!(matches!(TextAnchorSet::from_import_bytes(&bytes), Err(Error::Config(_))));
        let bytes = set.to_import_bytes();
        assert!(TextAnchorSet::from_import_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
