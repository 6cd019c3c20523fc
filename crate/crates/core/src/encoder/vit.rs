//! Pre-LayerNorm vision transformer with optional prompt tokens.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::diffcore::layers::{linear, mlp_block, multi_head_attention, AttentionWeights};
use crate::diffcore::{randn, Mode, ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{Image, RandomStream};

/// Where learnable prompt tokens enter the token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    None,
    Shallow,
    Deep,
}

impl PromptMode {
    pub fn id(self) -> &'static str {
        match self {
            PromptMode::None => "none",
            PromptMode::Shallow => "shallow",
            PromptMode::Deep => "deep",
        }
    }
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Shallow,
    Deep,
    Full,
}

impl TuneMode {
    pub fn id(self) -> &'static str {
        match self {
            TuneMode::Shallow => "shallow",
            TuneMode::Deep => "deep",
            TuneMode::Full => "full",
        }
    }

    /// Prompt layout implied by the mode.
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            TuneMode::Shallow => PromptMode::Shallow,
            TuneMode::Deep => PromptMode::Deep,
            TuneMode::Full => PromptMode::None,
        }
    }
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(TuneMode::Shallow),
            "deep" => Ok(TuneMode::Deep),
            "full" => Ok(TuneMode::Full),
            other => Err(Error::Config(format!("unknown tuning mode `{other}` (shallow, deep, full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Output embedding width `d`.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    pub channels: usize,
    /// Side length images are cropped and resized to before encoding.
    pub image_size: usize,
    pub prompt_mode: PromptMode,
    pub prompt_len: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            d_model: 64,
            layers: 4,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
            channels: 3,
            image_size: 64,
            prompt_mode: PromptMode::None,
            prompt_len: 0,
        }
    }
}

pub const GROUP_EMBED: &str = "encoder.embed";
pub const GROUP_HEAD: &str = "encoder.head";
pub const GROUP_SHALLOW: &str = "prompt.shallow";
pub const GROUP_DEEP: &str = "prompt.deep";

fn block_group(l: usize) -> String {
    format!("encoder.block{l}")
}

pub fn is_encoder_group(group: &str) -> bool {
    group.starts_with("encoder.") || group.starts_with("prompt.")
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.d_model == 0 || self.embed_dim == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_model % 4 != 0 {
            return bad(format!("d_model {} must be a multiple of 4 for 2-D positions", self.d_model));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.prompt_mode == PromptMode::None && self.prompt_len != 0 {
            return bad("prompt_len must be 0 when prompt_mode is none".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Class token plus one token per patch for an `h × w` input.
    pub fn token_count(&self, h: usize, w: usize) -> usize {
        (h / self.patch_size) * (w / self.patch_size) + 1
    }

    /// Creates every encoder tensor (and the prompt tensors of the configured
    /// mode) in `store`.
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        self.validate()?;
        let mut rng = RandomStream::seed_from_u64(seed);
        let r = &mut rng;
        let (d, hidden) = (self.d_model, self.d_model * self.mlp_ratio);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        store.insert("patch.w", GROUP_EMBED, randn(self.patch_dim(), d, fan(self.patch_dim()), r))?;
        store.insert("patch.b", GROUP_EMBED, Tensor::zeros(&[1, d]))?;
        store.insert("cls", GROUP_EMBED, randn(1, d, 0.02, r))?;
        for l in 0..self.layers {
            let g = block_group(l);
            let p = |n: &str| format!("blk{l}.{n}");
            store.insert(p("ln1.g"), &g, Tensor::full(&[1, d], 1.0))?;
            store.insert(p("ln1.b"), &g, Tensor::zeros(&[1, d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(p(&format!("attn.{w}")), &g, randn(d, d, fan(d), r))?;
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(p(&format!("attn.{b}")), &g, Tensor::zeros(&[1, d]))?;
            }
            store.insert(p("ln2.g"), &g, Tensor::full(&[1, d], 1.0))?;
            store.insert(p("ln2.b"), &g, Tensor::zeros(&[1, d]))?;
            store.insert(p("mlp.w1"), &g, randn(d, hidden, fan(d), r))?;
            store.insert(p("mlp.b1"), &g, Tensor::zeros(&[1, hidden]))?;
            store.insert(p("mlp.w2"), &g, randn(hidden, d, fan(hidden), r))?;
            store.insert(p("mlp.b2"), &g, Tensor::zeros(&[1, d]))?;
        }
        store.insert("ln_post.g", GROUP_HEAD, Tensor::full(&[1, d], 1.0))?;
        store.insert("ln_post.b", GROUP_HEAD, Tensor::zeros(&[1, d]))?;
        store.insert("proj", GROUP_HEAD, randn(d, self.embed_dim, fan(d), r))?;
        match self.prompt_mode {
            PromptMode::None => {}
            PromptMode::Shallow => {
                store.insert("prompt.shallow", GROUP_SHALLOW, randn(self.prompt_len, d, 0.02, r))?;
            }
            PromptMode::Deep => {
                for l in 0..self.layers {
                    store.insert(format!("prompt.deep{l}"), GROUP_DEEP, randn(self.prompt_len, d, 0.02, r))?;
                }
            }
        }
        Ok(())
    }
}

/// Marks the tensors a tuning mode may update and freezes the rest of the
/// encoder. Groups outside the encoder stay trainable. Returns the
/// trainable encoder groups.
pub fn trainable_params(store: &mut ParamStore, mode: TuneMode) -> Vec<ParamGroup> {
    store.set_trainable_groups(|g| match mode {
        TuneMode::Shallow => g == GROUP_SHALLOW || !is_encoder_group(g),
        TuneMode::Deep => g == GROUP_DEEP || !is_encoder_group(g),
        TuneMode::Full => true,
    });
    store
        .groups()
        .into_iter()
        .filter(|g| g.trainable && is_encoder_group(&g.name))
        .collect()
}

/// Non-overlapping patches as rows `[n_patches, p·p·C]`, raster order over
/// patches, `(dy, dx, c)` order within a patch. Grayscale inputs are
/// replicated when the encoder expects colour.
pub fn patchify(img: &Image, patch: usize, channels: usize) -> Result<Tensor> {
    let (h, w) = (img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("patchify", &[h, w], &[patch, patch]));
    }
    if img.channels() != channels && !(img.channels() == 1 && channels == 3) {
        return Err(Error::shape("patchify", &[h, w, img.channels()], &[h, w, channels]));
    }
    let (gy, gx) = (h / patch, w / patch);
    let dim = patch * patch * channels;
    let mut data = Vec::with_capacity(gy * gx * dim);
    for py in 0..gy {
        for px in 0..gx {
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..channels {
                        let src_c = if img.channels() == 1 { 0 } else { c };
                        data.push(f64::from(img.get(py * patch + dy, px * patch + dx, src_c)));
                    }
                }
            }
        }
    }
    Tensor::matrix(gy * gx, dim, data)
}

/// Inverse of [`patchify`]'s layout: maps a `[n_patches, p·p·C]` tensor back
/// to interleaved `h × w × C` order.
pub fn unpatchify(t: &Tensor, h: usize, w: usize, patch: usize, channels: usize) -> Result<Vec<f64>> {
    let (gy, gx) = (h / patch, w / patch);
    if t.shape() != [gy * gx, patch * patch * channels] {
        return Err(Error::shape("unpatchify", t.shape(), &[gy * gx, patch * patch * channels]));
    }
    let mut out = vec![0.0; h * w * channels];
    let mut it = t.data().iter();
    for py in 0..gy {
        for px in 0..gx {
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..channels {
                        out[((py * patch + dy) * w + px * patch + dx) * channels + c] = *it.next().expect("sized");
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fixed 2-D sinusoidal table `[gy·gx, d]`: half the width encodes the row,
/// half the column.
pub fn positional_table(gy: usize, gx: usize, d: usize) -> Tensor {
    let quarter = d / 4;
    let freq = |k: usize| 1.0 / 100f64.powf(k as f64 / quarter.max(1) as f64);
    Tensor::from_fn(gy * gx, d, |t, j| {
        let (y, x) = ((t / gx) as f64, (t % gx) as f64);
        let (pos, j) = if j < d / 2 { (y, j) } else { (x, j - d / 2) };
        let k = j % quarter.max(1);
        if j < quarter {
            (pos * freq(k)).sin()
        } else {
            (pos * freq(k)).cos()
        }
    })
}

/// Appends prompt rows after the existing tokens.
pub fn insert_shallow_prompts(tape: &mut Tape<'_>, tokens: Var, prompts: Var) -> Result<Var> {
    if tape.shape(prompts)[0] == 0 {
        return Ok(tokens);
    }
    tape.concat_rows(&[tokens, prompts])
}

fn block(tape: &mut Tape<'_>, cfg: &VitConfig, l: usize, x: Var) -> Result<Var> {
    let mut p = |n: &str| tape.param_by_name(&format!("blk{l}.{n}"));
    let (g1, b1, g2, b2) = (p("ln1.g")?, p("ln1.b")?, p("ln2.g")?, p("ln2.b")?);
    let w = AttentionWeights {
        wq: p("attn.wq")?,
        bq: p("attn.bq")?,
        wk: p("attn.wk")?,
        bk: p("attn.bk")?,
        wv: p("attn.wv")?,
        bv: p("attn.bv")?,
        wo: p("attn.wo")?,
        bo: p("attn.bo")?,
    };
    let (w1, c1, w2, c2) = (p("mlp.w1")?, p("mlp.b1")?, p("mlp.w2")?, p("mlp.b2")?);
    let h = tape.layer_norm(x, g1, b1)?;
    let a = multi_head_attention(tape, h, &w, cfg.heads)?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, g2, b2)?;
    let m = mlp_block(tape, h, w1, c1, w2, c2)?;
    tape.add(x, m)
}

/// Embeds raw pixel patches into the initial token sequence
/// `[class; patches] + positions`.
pub fn embed_tokens(tape: &mut Tape<'_>, cfg: &VitConfig, patches: Var, grid: (usize, usize)) -> Result<Var> {
    let n = tape.shape(patches)[0];
    if n != grid.0 * grid.1 || tape.shape(patches)[1] != cfg.patch_dim() {
        return Err(Error::shape("embed_tokens", tape.shape(patches), &[grid.0 * grid.1, cfg.patch_dim()]));
    }
    // pixels in [0, 1] centred to roughly unit spread
    let x = tape.scale(patches, 4.0);
    let shift = tape.constant(Tensor::full(&[1, cfg.patch_dim()], -2.0));
    let x = tape.add_row(x, shift)?;
    let (w, b) = (tape.param_by_name("patch.w")?, tape.param_by_name("patch.b")?);
    let x = linear(tape, x, w, Some(b))?;
    let pos = tape.constant(positional_table(grid.0, grid.1, cfg.d_model));
    let x = tape.add(x, pos)?;
    let cls = tape.param_by_name("cls")?;
    tape.concat_rows(&[cls, x])
}

/// Runs the transformer stack on an embedded token sequence, inserting the
/// prompts of the configured mode, and returns the class-token projection
/// `[1, embed_dim]`.
pub fn forward_tokens(tape: &mut Tape<'_>, cfg: &VitConfig, tokens: Var) -> Result<Var> {
    let mut x = tokens;
    match cfg.prompt_mode {
        PromptMode::None => {
            for l in 0..cfg.layers {
                x = block(tape, cfg, l, x)?;
            }
        }
        PromptMode::Shallow => {
            let prompts = tape.param_by_name("prompt.shallow")?;
            x = insert_shallow_prompts(tape, x, prompts)?;
            for l in 0..cfg.layers {
                x = block(tape, cfg, l, x)?;
            }
        }
        PromptMode::Deep => {
            let prompts = (0..cfg.layers)
                .map(|l| tape.param_by_name(&format!("prompt.deep{l}")))
                .collect::<Result<Vec<_>>>()?;
            x = deep_prompt_forward(tape, cfg, x, &prompts)?;
        }
    }
    head(tape, x)
}

/// At every layer appends that layer's prompts, applies the block and keeps
/// the first `H` positions.
pub fn deep_prompt_forward(tape: &mut Tape<'_>, cfg: &VitConfig, tokens: Var, per_layer: &[Var]) -> Result<Var> {
    if per_layer.len() != cfg.layers {
        return Err(Error::Config(format!(
            "deep prompting needs {} prompt tensors, got {}",
            cfg.layers,
            per_layer.len()
        )));
    }
    let len = per_layer.first().map(|&p| tape.shape(p)[0]).unwrap_or(0);
    if per_layer.iter().any(|&p| tape.shape(p)[0] != len) {
        return Err(Error::Config("per-layer prompts differ in length".into()));
    }
    let h = tape.shape(tokens)[0];
    let mut x = tokens;
    for (l, &p) in per_layer.iter().enumerate() {
        let y = insert_shallow_prompts(tape, x, p)?;
        let y = block(tape, cfg, l, y)?;
        x = if len == 0 { y } else { tape.slice_rows(y, 0, h)? };
    }
    Ok(x)
}

fn head(tape: &mut Tape<'_>, x: Var) -> Result<Var> {
    let cls = tape.slice_rows(x, 0, 1)?;
    let (g, b) = (tape.param_by_name("ln_post.g")?, tape.param_by_name("ln_post.b")?);
    let cls = tape.layer_norm(cls, g, b)?;
    let proj = tape.param_by_name("proj")?;
    tape.matmul(cls, proj)
}

/// Records the full image encoder on `tape` with the pixel patches as a leaf
/// input; returns `(patch_input, embedding)`.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    cfg: &VitConfig,
    img: &Image,
    input_grad: bool,
) -> Result<(Var, Var)> {
    let patches = patchify(img, cfg.patch_size, cfg.channels)?;
    let grid = (img.height() / cfg.patch_size, img.width() / cfg.patch_size);
    let input = tape.input(patches, input_grad);
    let tokens = embed_tokens(tape, cfg, input, grid)?;
    Ok((input, forward_tokens(tape, cfg, tokens)?))
}

/// Eval-mode embedding `E_I(img)`.
pub fn encode_image(store: &ParamStore, cfg: &VitConfig, img: &Image) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store, Mode::Eval);
    let (_, e) = encode_on_tape(&mut tape, cfg, img, false)?;
    Ok(tape.value(e).data().to_vec())
}
