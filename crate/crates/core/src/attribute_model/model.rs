//! Encoder plus anchors plus simplex weights, recorded on a tape.

use serde::{Deserialize, Serialize};

use super::probs::simplex_weights;
use super::registry::AttributeRegistry;
use crate::diffcore::{Checkpoint, Mode, ParamStore, Tape, Tensor, Var};
use crate::encoder::{embed_tokens, forward_tokens, patchify, trainable_params, TuneMode, VitConfig};
use crate::error::{Error, Result};
use crate::imaging::{DistortionType, Image};

pub const THETA: &str = "attr.theta";
pub const GROUP_WEIGHTS: &str = "attr.weights";
pub const MODEL_KIND: &str = "attriqa-distortion-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub tune: TuneMode,
    /// Unit-normalize image and anchor embeddings and divide the logits by
    /// `temperature`. Off by default: logits are raw dot products.
    #[serde(default)]
    pub normalize: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    0.01
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            tune: TuneMode::Full,
            normalize: false,
            temperature: default_temperature(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.tune != TuneMode::Full && self.vit.prompt_mode != self.tune.prompt_mode() {
            return Err(Error::Config(format!(
                "tuning mode {} needs prompt_mode {:?}, config has {:?}",
                self.tune,
                self.tune.prompt_mode(),
                self.vit.prompt_mode
            )));
        }
        if self.tune != TuneMode::Full && self.vit.prompt_len == 0 {
            return Err(Error::Config(format!("tuning mode {} needs prompt_len > 0", self.tune)));
        }
        if self.normalize && !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Vars recorded by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Pixel patches leaf.
    pub input: Var,
    pub embedding: Var,
    /// `[1, attributes]`.
    pub attr_probs: Var,
    /// `[distortions, 1]`.
    pub dist_probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub attr_probs: Vec<f64>,
    pub dist_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DistortionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub distortions: Vec<DistortionType>,
    pub attrs_per_distortion: usize,
    pub registry_digest: String,
    anchor_pos: Tensor,
    anchor_neg: Tensor,
}

fn normalized_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

impl DistortionModel {
    pub fn new(config: ModelConfig, registry: &AttributeRegistry, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config.vit.init_params(&mut params, seed)?;
        params.insert(
            THETA,
            GROUP_WEIGHTS,
            Tensor::zeros(&[registry.distortions.len(), registry.attrs_per_distortion]),
        )?;
        Self::assemble(config, params, registry)
    }

    fn assemble(config: ModelConfig, mut params: ParamStore, registry: &AttributeRegistry) -> Result<Self> {
        registry.validate()?;
        if registry.anchors.dim != config.vit.embed_dim {
            return Err(Error::Config(format!(
                "registry anchors have dimension {} but the encoder embeds to {}",
                registry.anchors.dim, config.vit.embed_dim
            )));
        }
        let theta = params.by_name(THETA)?;
        if theta.shape() != [registry.distortions.len(), registry.attrs_per_distortion] {
            return Err(Error::Config(format!(
                "weight table {:?} does not match the registry ({} × {})",
                theta.shape(),
                registry.distortions.len(),
                registry.attrs_per_distortion
            )));
        }
        trainable_params(&mut params, config.tune);
        let (mut pos, mut neg) = registry.anchor_matrices();
        if config.normalize {
            pos = normalized_rows(&pos);
            neg = normalized_rows(&neg);
        }
        Ok(Self {
            params,
            distortions: registry.distortion_types(),
            attrs_per_distortion: registry.attrs_per_distortion,
            registry_digest: registry.digest(),
            anchor_pos: pos,
            anchor_neg: neg,
            config,
        })
    }

    pub fn attribute_count(&self) -> usize {
        self.distortions.len() * self.attrs_per_distortion
    }

    /// Realized simplex weights, one row per distortion.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let theta = self.params.by_name(THETA).expect("theta present");
        (0..theta.rows()).map(|r| simplex_weights(theta.row(r))).collect()
    }

    /// Crops and resizes to the configured encoder resolution when needed.
    pub fn prepare(&self, img: &Image) -> Result<Image> {
        let s = self.config.vit.image_size;
        if img.height() == s && img.width() == s {
            Ok(img.clone())
        } else {
            img.center_crop_resize(s)
        }
    }

    /// Records encoder, attribute probabilities and distortion probabilities.
    /// Any image whose sides are multiples of the patch size is accepted.
    pub fn record<'s>(&'s self, tape: &mut Tape<'s>, img: &Image, input_grad: bool) -> Result<Forward> {
        let p = self.config.vit.patch_size;
        let patches = patchify(img, p, self.config.vit.channels)?;
        self.record_patches(tape, patches, (img.height() / p, img.width() / p), input_grad)
    }

    /// Same as [`record`](Self::record) from an already patchified input
    /// laid out on a `grid` of patches.
    pub fn record_patches<'s>(
        &'s self,
        tape: &mut Tape<'s>,
        patches: Tensor,
        grid: (usize, usize),
        input_grad: bool,
    ) -> Result<Forward> {
        let input = tape.input(patches, input_grad);
        let tokens = embed_tokens(tape, &self.config.vit, input, grid)?;
        let mut e = forward_tokens(tape, &self.config.vit, tokens)?;
        let embedding = e;
        if self.config.normalize {
            e = tape.l2_normalize_rows(e);
            e = tape.scale(e, 1.0 / self.config.temperature);
        }
        let pos = tape.constant(self.anchor_pos.clone());
        let neg = tape.constant(self.anchor_neg.clone());
        let zp = tape.matmul_nt(e, pos)?;
        let zn = tape.matmul_nt(e, neg)?;
        let diff = tape.sub(zp, zn)?;
        let attr_probs = tape.sigmoid(diff);
        let grid = tape.reshape(attr_probs, &[self.distortions.len(), self.attrs_per_distortion])?;
        let theta = tape.param_by_name(THETA)?;
        let w = tape.softmax_rows(theta);
        let weighted = tape.mul(grid, w)?;
        let dist_probs = tape.sum_rows(weighted);
        Ok(Forward {
            input,
            embedding,
            attr_probs,
            dist_probs,
        })
    }

    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        let img = self.prepare(img)?;
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let f = self.record(&mut tape, &img, false)?;
        let attr_probs = tape.value(f.attr_probs).data().to_vec();
        let dist_probs = tape.value(f.dist_probs).data().to_vec();
        if !attr_probs.iter().chain(&dist_probs).all(|p| p.is_finite()) {
            return Err(Error::Numerical("non-finite probability in prediction".into()));
        }
        Ok(Prediction { attr_probs, dist_probs })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let metadata = serde_json::json!({
            "kind": MODEL_KIND,
            "config": self.config,
            "distortions": self.distortions,
            "attrs_per_distortion": self.attrs_per_distortion,
            "registry_digest": self.registry_digest,
            "extra": extra,
        });
        Checkpoint {
            metadata,
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model, refusing a registry other than the one it was
    /// trained against.
    pub fn from_checkpoint(ck: Checkpoint, registry: &AttributeRegistry) -> Result<Self> {
        let meta = &ck.metadata;
        if meta["kind"] != MODEL_KIND {
            return Err(Error::Config(format!("checkpoint kind {} is not {MODEL_KIND}", meta["kind"])));
        }
        let expected = meta["registry_digest"].as_str().unwrap_or_default().to_string();
        let found = registry.digest();
        if expected != found {
            return Err(Error::DigestMismatch {
                what: "attribute registry".into(),
                expected,
                found,
            });
        }
        let config: ModelConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        config.validate()?;
        Self::assemble(config, ck.params, registry)
    }
}
