//! Two-phase sharpness-aware updates.
//!
//! A step is `perturb` (move to `w + eps` using the gradient at `w`), then a
//! second gradient evaluation at `w + eps`, then `update` (restore `w` and
//! take a base SGD step with the perturbed gradient). Momentum buffers only
//! change in `update`.

use crate::error::{Error, Result};
use crate::nn::{global_norm, ParamKind, ParamSet};
use crate::optim::sgd::{Sgd, SgdConfig};
use crate::tensor::Tensor;

pub const DEFAULT_SAM_RHO: f64 = 0.05;
pub const DEFAULT_ASAM_RHO: f64 = 0.5;
pub const DEFAULT_ASAM_ETA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Ready,
    Perturbed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamConfig {
    pub rho: f64,
    pub base: SgdConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AsamConfig {
    pub rho: f64,
    /// Added to `|w|` in the rescaling operator.
    pub eta: f64,
    pub base: SgdConfig,
}

fn check_non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")))
    }
}

/// Mutable state shared by both sharpness-aware optimizers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub base: Sgd,
    pub phase: Phase,
    /// Parameters before perturbation (`w_t`), held between the phases.
    pub origin: Vec<Tensor>,
    /// Last perturbation `eps_t`.
    pub perturbation: Vec<Tensor>,
}

impl OptimizerState {
    fn new(base: SgdConfig) -> Result<Self> {
        Ok(OptimizerState {
            base: Sgd::new(base)?,
            phase: Phase::Ready,
            origin: Vec::new(),
            perturbation: Vec::new(),
        })
    }

    fn begin(&self, params: &ParamSet, grads: &[Tensor]) -> Result<()> {
        if self.phase != Phase::Ready {
            return Err(Error::Phase("perturb called twice without an update"));
        }
        params.check_aligned(grads)
    }

    fn apply(&mut self, params: &mut ParamSet, eps: Vec<Tensor>) {
        self.origin = params.tensors().cloned().collect();
        for (w, e) in params.tensors_mut().zip(&eps) {
            for (wi, ei) in w.data_mut().iter_mut().zip(e.data()) {
                *wi += ei;
            }
        }
        self.perturbation = eps;
        self.phase = Phase::Perturbed;
    }

    fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if self.phase != Phase::Perturbed {
            return Err(Error::Phase("update called before perturb"));
        }
        params.check_aligned(grads)?;
        for (w, origin) in params.tensors_mut().zip(self.origin.drain(..)) {
            *w = origin;
        }
        self.phase = Phase::Ready;
        self.base.step(params, grads)
    }
}

fn zeros_like(grads: &[Tensor]) -> Vec<Tensor> {
    grads.iter().map(|g| Tensor::zeros(g.shape())).collect()
}

fn scaled(tensors: &[Tensor], factor: f64) -> Vec<Tensor> {
    tensors.iter().map(|t| t.map(|v| v * factor)).collect()
}

/// `eps = rho * g / ||g||_2` with one norm over all parameters.
pub fn sam_perturbation(grads: &[Tensor], rho: f64) -> Vec<Tensor> {
    let norm = global_norm(grads);
    if rho == 0.0 || norm == 0.0 {
        return zeros_like(grads);
    }
    scaled(grads, rho / norm)
}

/// Element-wise rescaling operator: `|w| + eta` on dense/conv weights,
/// one on biases and batch-norm parameters.
pub fn rescaling_operator(params: &ParamSet, eta: f64) -> Vec<Tensor> {
    params
        .iter()
        .map(|p| match p.kind {
            ParamKind::Weight => p.tensor.map(|w| w.abs() + eta),
            _ => Tensor::filled(p.tensor.shape(), 1.0),
        })
        .collect()
}

/// `eps = rho * T^2 g / ||T g||_2`, which satisfies `||T^-1 eps||_2 = rho`.
pub fn asam_perturbation(params: &ParamSet, grads: &[Tensor], rho: f64, eta: f64) -> Vec<Tensor> {
    let ops = rescaling_operator(params, eta);
    let tg: Vec<Tensor> = ops
        .iter()
        .zip(grads)
        .map(|(t, g)| crate::autodiff::kernels::mul(t, g).expect("aligned"))
        .collect();
    let norm = global_norm(&tg);
    if rho == 0.0 || norm == 0.0 {
        return zeros_like(grads);
    }
    let factor = rho / norm;
    ops.iter()
        .zip(&tg)
        .map(|(t, v)| {
            let data = t
                .data()
                .iter()
                .zip(v.data())
                .map(|(ti, vi)| factor * ti * vi)
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Sam {
    rho: f64,
    state: OptimizerState,
}

impl Sam {
    pub fn new(cfg: SamConfig) -> Result<Self> {
        check_non_negative("rho", cfg.rho)?;
        Ok(Sam {
            rho: cfg.rho,
            state: OptimizerState::new(cfg.base)?,
        })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.state.base.set_learning_rate(lr);
    }

    /// Move `params` to `w + eps` using gradients taken at `w`.
    pub fn perturb(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        self.state.begin(params, grads)?;
        let eps = sam_perturbation(grads, self.rho);
        self.state.apply(params, eps);
        Ok(())
    }

    /// Restore `w` and step with gradients taken at `w + eps`. Weight decay
    /// acts on the restored `w`.
    pub fn update(&mut self, params: &mut ParamSet, grads_at_perturbed: &[Tensor]) -> Result<()> {
        self.state.update(params, grads_at_perturbed)
    }
}

#[derive(Clone, Debug)]
pub struct Asam {
    rho: f64,
    eta: f64,
    state: OptimizerState,
}

impl Asam {
    pub fn new(cfg: AsamConfig) -> Result<Self> {
        check_non_negative("rho", cfg.rho)?;
        check_non_negative("eta", cfg.eta)?;
        Ok(Asam {
            rho: cfg.rho,
            eta: cfg.eta,
            state: OptimizerState::new(cfg.base)?,
        })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.state.base.set_learning_rate(lr);
    }

    pub fn perturb(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        self.state.begin(params, grads)?;
        let eps = asam_perturbation(params, grads, self.rho, self.eta);
        self.state.apply(params, eps);
        Ok(())
    }

    pub fn update(&mut self, params: &mut ParamSet, grads_at_perturbed: &[Tensor]) -> Result<()> {
        self.state.update(params, grads_at_perturbed)
    }
}
