use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Per-epoch learning-rate schedule over `total_epochs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn constant(lr: f64, total_epochs: usize) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            base_lr: lr,
            min_lr: lr,
            total_epochs,
        }
    }

    pub fn cosine(base_lr: f64, min_lr: f64, total_epochs: usize) -> Self {
        Schedule {
            kind: ScheduleKind::Cosine,
            base_lr,
            min_lr,
            total_epochs,
        }
    }

    /// Learning rate at epoch `t` (`0 <= t <= total_epochs`). Cosine is
    /// `min + (base - min) * (1 + cos(pi * t / T)) / 2`.
    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {t} beyond schedule length {}",
                self.total_epochs
            )));
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine if self.total_epochs == 0 => self.base_lr,
            ScheduleKind::Cosine => {
                let frac = t as f64 / self.total_epochs as f64;
                let lr = self.min_lr
                    + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos());
                lr.clamp(self.min_lr, self.base_lr)
            }
        })
    }
}
