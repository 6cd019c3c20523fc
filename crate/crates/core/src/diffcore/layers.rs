//! Composite blocks built from tape primitives.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// `x · w + b` for row-token input `x: [m, in]`.
pub fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Scaled dot-product self-attention over the rows of `x: [tokens, d]`.
pub fn multi_head_attention(tape: &mut Tape<'_>, x: Var, w: &AttentionWeights, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = linear(tape, x, w.wq, Some(w.bq))?;
    let k = linear(tape, x, w.wk, Some(w.bk))?;
    let v = linear(tape, x, w.wv, Some(w.bv))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    linear(tape, merged, w.wo, Some(w.bo))
}

/// Two-layer position-wise feed-forward block with GELU.
pub fn mlp_block(tape: &mut Tape<'_>, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let h = linear(tape, x, w1, Some(b1))?;
    let h = tape.gelu(h);
    linear(tape, h, w2, Some(b2))
}
