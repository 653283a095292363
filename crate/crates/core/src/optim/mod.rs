//! SGD, SAM and ASAM update rules and learning-rate schedules.

mod sam;
mod schedule;
mod sgd;

pub use sam::{
    asam_perturbation, rescaling_operator, sam_perturbation, Asam, AsamConfig, OptimizerState,
    Phase, Sam, SamConfig, DEFAULT_ASAM_ETA, DEFAULT_ASAM_RHO, DEFAULT_SAM_RHO,
};
pub use schedule::{Schedule, ScheduleKind};
pub use sgd::{Sgd, SgdConfig};

use crate::error::Result;
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

/// Any of the three optimizers, driven one minibatch at a time.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Sam(Sam),
    Asam(Asam),
}

impl Optimizer {
    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.set_learning_rate(lr),
            Optimizer::Sam(o) => o.set_learning_rate(lr),
            Optimizer::Asam(o) => o.set_learning_rate(lr),
        }
    }

    /// Forward+backward passes per step: 1 for SGD, 2 for SAM/ASAM.
    pub fn passes_per_step(&self) -> u64 {
        match self {
            Optimizer::Sgd(_) => 1,
            Optimizer::Sam(_) | Optimizer::Asam(_) => 2,
        }
    }

    /// One training step on a minibatch. Returns the loss at the
    /// pre-step parameters.
    pub fn step(&mut self, model: &mut Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let (loss, grads) = model.loss_and_grads(x, labels, Mode::Train)?;
        match self {
            Optimizer::Sgd(o) => o.step(model.params_mut(), &grads)?,
            Optimizer::Sam(o) => {
                o.perturb(model.params_mut(), &grads)?;
                let (_, perturbed) = model.loss_and_grads(x, labels, Mode::TrainFrozenStats)?;
                o.update(model.params_mut(), &perturbed)?;
            }
            Optimizer::Asam(o) => {
                o.perturb(model.params_mut(), &grads)?;
                let (_, perturbed) = model.loss_and_grads(x, labels, Mode::TrainFrozenStats)?;
                o.update(model.params_mut(), &perturbed)?;
            }
        }
        Ok(loss)
    }
}
