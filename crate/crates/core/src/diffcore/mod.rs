//! Dense tensors with reverse-mode gradients, parameter management and a
//! finite-difference verifier.

mod checkpoint;
mod fdcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, DType, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fdcheck::{fd_check, fd_check_input, relative_error, FdConfig, FdReport, GroupFdReport, Stencil};
pub use params::{Adam, CosineSchedule, Grads, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use tape::{bce_term, gelu, selu, sigmoid, Mode, Tape, Var, PROB_EPS, SELU_ALPHA, SELU_LAMBDA};
pub use tensor::{matmul, Tensor};

use rand_distr::{Distribution, Normal};

use crate::imaging::RandomStream;

/// Gaussian-initialized `[rows, cols]` tensor.
pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut RandomStream) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| normal.sample(rng))
}
