//! Attribute texts per distortion and their frozen text anchors.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::digest::sha256_hex;
use crate::encoder::{AnchorProvenance, TextAnchorSet};
use crate::error::{Error, Result};
use crate::imaging::DistortionType;

pub const ATTRIBUTES_FORMAT: &str = "attriqa-attributes";
pub const REGISTRY_FORMAT: &str = "attriqa-registry";
pub const REGISTRY_VERSION: u32 = 1;
pub const DEFAULT_ATTRS_PER_DISTORTION: usize = 5;

/// The attribute file shipped with the library.
pub const SHIPPED_ATTRIBUTES: &str = include_str!("../../assets/attributes.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeProvenance {
    Published,
    Author,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeText {
    pub text: String,
    pub positive: String,
    pub negative: String,
}

impl AttributeText {
    pub fn from_text(text: &str) -> Self {
        Self {
            text: text.to_string(),
            positive: positive_sentence(text),
            negative: negative_sentence(text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionAttributes {
    pub distortion: DistortionType,
    pub provenance: AttributeProvenance,
    pub attributes: Vec<AttributeText>,
}

/// Core phrase of an attribute: a leading "There is" and a trailing
/// "in the photo." are dropped so the template does not repeat them.
pub fn attribute_core(text: &str) -> &str {
    let mut core = text.trim();
    if core.len() >= 9 && core[..9].eq_ignore_ascii_case("there is ") {
        core = &core[9..];
    }
    core = core.trim_end_matches('.').trim_end();
    for suffix in [" in the photo", " in the image"] {
        if let Some(stripped) = core.strip_suffix(suffix) {
            core = stripped;
        }
    }
    core.trim()
}

pub fn positive_sentence(text: &str) -> String {
    format!("There is {} in the photo.", attribute_core(text))
}

pub fn negative_sentence(text: &str) -> String {
    format!("There is not {} in the photo.", attribute_core(text))
}

fn validate_entries(entries: &[DistortionAttributes], per: usize) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Config("attribute set lists no distortions".into()));
    }
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(e.distortion) {
            return Err(Error::DuplicateDistortion(e.distortion.id().to_string()));
        }
        if e.attributes.len() != per {
            return Err(Error::Config(format!(
                "{} has {} attributes, expected {per}",
                e.distortion,
                e.attributes.len()
            )));
        }
        for a in &e.attributes {
            if attribute_core(&a.text).is_empty() {
                return Err(Error::Config(format!("{} has an empty attribute", e.distortion)));
            }
            if a.positive != positive_sentence(&a.text) || a.negative != negative_sentence(&a.text) {
                return Err(Error::Config(format!(
                    "sentences for `{}` do not follow the template (expected `{}` / `{}`)",
                    a.text,
                    positive_sentence(&a.text),
                    negative_sentence(&a.text)
                )));
            }
        }
    }
    Ok(())
}

/// Human-editable attribute texts, the input to registry building.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeFile {
    pub format: String,
    pub version: u32,
    pub distortions: Vec<DistortionAttributes>,
}

impl AttributeFile {
    pub fn parse(json: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(json).map_err(|e| Error::Config(format!("attribute file: {e}")))?;
        if file.format != ATTRIBUTES_FORMAT || file.version != REGISTRY_VERSION {
            return Err(Error::Config(format!(
                "attribute file declares {} v{}, expected {ATTRIBUTES_FORMAT} v{REGISTRY_VERSION}",
                file.format, file.version
            )));
        }
        let per = file.distortions.first().map_or(0, |d| d.attributes.len());
        validate_entries(&file.distortions, per)?;
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_ATTRIBUTES).expect("shipped attribute file is valid")
    }

    /// Keeps the listed distortions in the listed order.
    pub fn select(&self, distortions: &[DistortionType]) -> Result<Self> {
        let picked = distortions
            .iter()
            .map(|d| {
                self.distortions
                    .iter()
                    .find(|e| e.distortion == *d)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("{d} has no attributes in the attribute file")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: self.format.clone(),
            version: self.version,
            distortions: picked,
        })
    }
}

/// Where anchor embeddings come from when building a registry.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    Toy { dim: usize },
    Imported(TextAnchorSet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRegistry {
    pub format: String,
    pub version: u32,
    pub attrs_per_distortion: usize,
    pub distortions: Vec<DistortionAttributes>,
    pub anchors: TextAnchorSet,
    /// Creator and input digests; empty for registries built in code.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, String>,
}

pub fn anchor_id(d: DistortionType, k: usize) -> String {
    format!("{}/{k}", d.id())
}

impl AttributeRegistry {
    pub fn build(file: &AttributeFile, source: EmbeddingSource) -> Result<Self> {
        let per = file.distortions.first().map_or(0, |d| d.attributes.len());
        validate_entries(&file.distortions, per)?;
        let anchors = match source {
            EmbeddingSource::Toy { dim } => {
                let triples: Vec<(String, &str, &str)> = file
                    .distortions
                    .iter()
                    .flat_map(|e| {
                        e.attributes
                            .iter()
                            .enumerate()
                            .map(move |(k, a)| (anchor_id(e.distortion, k), a.positive.as_str(), a.negative.as_str()))
                    })
                    .collect();
                TextAnchorSet::toy(dim, triples.iter().map(|(id, p, n)| (id.as_str(), *p, *n)))?
            }
            EmbeddingSource::Imported(set) => {
                // keep only (and order by) the attributes of this registry
                let pairs = file
                    .distortions
                    .iter()
                    .flat_map(|e| (0..e.attributes.len()).map(move |k| anchor_id(e.distortion, k)))
                    .map(|id| {
                        set.get(&id)
                            .cloned()
                            .ok_or_else(|| Error::Config(format!("imported embeddings lack attribute `{id}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                TextAnchorSet {
                    dim: set.dim,
                    provenance: AnchorProvenance::Imported,
                    pairs,
                }
            }
        };
        let reg = Self {
            format: REGISTRY_FORMAT.to_string(),
            version: REGISTRY_VERSION,
            attrs_per_distortion: per,
            distortions: file.distortions.clone(),
            anchors,
            provenance: BTreeMap::new(),
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != REGISTRY_FORMAT || self.version != REGISTRY_VERSION {
            return Err(Error::Config(format!(
                "registry declares {} v{}, expected {REGISTRY_FORMAT} v{REGISTRY_VERSION}",
                self.format, self.version
            )));
        }
        validate_entries(&self.distortions, self.attrs_per_distortion)?;
        self.anchors.validate()?;
        let ids: Vec<String> = self.column_names();
        if ids.len() != self.anchors.pairs.len() || ids.iter().zip(&self.anchors.pairs).any(|(i, p)| *i != p.id) {
            return Err(Error::Config("anchor table does not match the attribute order".into()));
        }
        Ok(())
    }

    pub fn distortion_types(&self) -> Vec<DistortionType> {
        self.distortions.iter().map(|d| d.distortion).collect()
    }

    pub fn attribute_count(&self) -> usize {
        self.distortions.len() * self.attrs_per_distortion
    }

    /// `<distortion>/<k>` in (distortion, attribute) order.
    pub fn column_names(&self) -> Vec<String> {
        self.distortions
            .iter()
            .flat_map(|e| (0..e.attributes.len()).map(move |k| anchor_id(e.distortion, k)))
            .collect()
    }

    /// Positive and negative anchors stacked as `[attributes, d]` matrices.
    pub fn anchor_matrices(&self) -> (Tensor, Tensor) {
        let (a, d) = (self.anchors.pairs.len(), self.anchors.dim);
        let stack = |f: fn(&crate::encoder::AnchorPair) -> &Vec<f64>| {
            let data = self.anchors.pairs.iter().flat_map(|p| f(p).iter().copied()).collect();
            Tensor::matrix(a, d, data).expect("validated anchor dims")
        };
        (stack(|p| &p.positive), stack(|p| &p.negative))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    /// SHA-256 of the serialized registry; binds checkpoints to anchors.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let reg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        reg.validate()?;
        Ok(reg)
    }
}
