//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use super::params::{Grads, ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;
use crate::imaging::RandomStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central2,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`
    Central4,
}

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    pub h: f64,
    pub tolerance: f64,
    pub samples_per_group: usize,
    pub seed: u64,
    pub stencil: Stencil,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tolerance: 1e-4,
            samples_per_group: 200,
            seed: 0,
            stencil: Stencil::Central4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupFdReport {
    pub group: String,
    pub trainable: bool,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude; must be 0 for frozen groups.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub groups: Vec<GroupFdReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl FdReport {
    /// Every trainable group within tolerance and every frozen group with an
    /// identically zero gradient.
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| {
            if g.trainable {
                g.max_rel_error <= self.tolerance
            } else {
                g.max_abs_grad == 0.0
            }
        })
    }
}

/// `|a - b| / max(1e-6, |a| + |b|)`.
///
/// The floor keeps exactly-zero gradients (a key bias under softmax, say)
/// from failing on the ~1e-12 roundoff of the difference quotient.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn central_difference(cfg: &FdConfig, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = cfg.h;
    Ok(match cfg.stencil {
        Stencil::Central2 => (f(h)? - f(-h)?) / (2.0 * h),
        Stencil::Central4 => (8.0 * (f(h)? - f(-h)?) - (f(2.0 * h)? - f(-2.0 * h)?)) / (12.0 * h),
    })
}

/// Compares `grads` with central differences of `loss` on a random subset
/// of at most `samples_per_group` coordinates per trainable group.
pub fn fd_check(
    store: &ParamStore,
    grads: &Grads,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    cfg: &FdConfig,
) -> Result<FdReport> {
    let mut work = store.clone();
    let mut rng = RandomStream::seed_from_u64(cfg.seed);
    let mut reports = Vec::new();
    for group in store.groups() {
        // flatten (param, offset) coordinates of the group
        let coords: Vec<(usize, usize)> = group
            .params
            .iter()
            .flat_map(|&p| (0..store.entries()[p].value.len()).map(move |o| (p, o)))
            .collect();
        let max_abs_grad = coords
            .iter()
            .map(|&(p, o)| grads.get(ParamId(p)).data()[o].abs())
            .fold(0.0, f64::max);
        let mut report = GroupFdReport {
            group: group.name.clone(),
            trainable: group.trainable,
            checked: 0,
            max_rel_error: 0.0,
            max_abs_grad,
        };
        if group.trainable && !coords.is_empty() {
            let k = cfg.samples_per_group.min(coords.len());
            for idx in sample(&mut rng, coords.len(), k) {
                let (p, o) = coords[idx];
                let id = ParamId(p);
                let orig = work.get(id).data()[o];
                let numeric = central_difference(cfg, |delta| {
                    work.get_mut(id).data_mut()[o] = orig + delta;
                    let l = loss(&work);
                    work.get_mut(id).data_mut()[o] = orig;
                    l
                })?;
                let analytic = grads.get(id).data()[o];
                report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
                report.checked += 1;
            }
        }
        reports.push(report);
    }
    let max_rel_error = reports
        .iter()
        .filter(|r| r.trainable)
        .map(|r| r.max_rel_error)
        .fold(0.0, f64::max);
    Ok(FdReport {
        groups: reports,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

/// Same comparison for the gradient of a scalar function of an input
/// tensor. Returns the maximum relative error over the sampled entries.
pub fn fd_check_input(
    input: &Tensor,
    grad: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    cfg: &FdConfig,
) -> Result<f64> {
    let mut work = input.clone();
    let mut rng = RandomStream::seed_from_u64(cfg.seed);
    let k = cfg.samples_per_group.min(input.len());
    let mut worst: f64 = 0.0;
    for o in sample(&mut rng, input.len(), k) {
        let orig = work.data()[o];
        let numeric = central_difference(cfg, |delta| {
            work.data_mut()[o] = orig + delta;
            let l = f(&work);
            work.data_mut()[o] = orig;
            l
        })?;
        worst = worst.max(relative_error(grad.data()[o], numeric));
    }
    Ok(worst)
}
