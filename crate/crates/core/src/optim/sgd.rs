use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Self {
        SgdConfig {
            learning_rate,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Heavy-ball SGD with weight decay folded into the gradient:
///
/// ```text
/// v <- momentum * v + (g + weight_decay * w)
/// w <- w - lr * v
/// ```
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd {
            cfg,
            velocity: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    /// Momentum buffers, empty until the first step.
    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        params.check_aligned(grads)?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.cfg;
        for ((w, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = momentum * *vi + (gi + weight_decay * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn single(w: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("w", ParamKind::Weight, Tensor::vector(vec![w])).unwrap();
        ps
    }

    #[test]
    fn plain_step() {
        let mut ps = single(1.0);
        let mut sgd = Sgd::new(SgdConfig::new(0.1)).unwrap();
        sgd.step(&mut ps, &[Tensor::vector(vec![1.0])]).unwrap();
        assert!((ps.tensor(0).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn pure_decay() {
        let mut ps = single(1.0);
        let cfg = SgdConfig {
            weight_decay: 0.5,
            ..SgdConfig::new(0.1)
        };
        let mut sgd = Sgd::new(cfg).unwrap();
        sgd.step(&mut ps, &[Tensor::vector(vec![0.0])]).unwrap();
        assert!((ps.tensor(0).data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut ps = single(0.0);
        let cfg = SgdConfig {
            momentum: 0.9,
            ..SgdConfig::new(0.1)
        };
        let mut sgd = Sgd::new(cfg).unwrap();
        let g = [Tensor::vector(vec![1.0])];
        sgd.step(&mut ps, &g).unwrap();
        assert!((sgd.velocity()[0].data()[0] - 1.0).abs() < 1e-15);
        sgd.step(&mut ps, &g).unwrap();
        assert!((sgd.velocity()[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((ps.tensor(0).data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn rejects_missing_or_misshaped_grads() {
        let mut ps = single(0.0);
        let mut sgd = Sgd::new(SgdConfig::new(0.1)).unwrap();
        assert!(matches!(sgd.step(&mut ps, &[]), Err(Error::MissingGrad(_))));
        assert!(sgd.step(&mut ps, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Sgd::new(SgdConfig::new(0.0)).is_err());
        let cfg = SgdConfig {
            momentum: 1.0,
            ..SgdConfig::new(0.1)
        };
        assert!(Sgd::new(cfg).is_err());
        let cfg = SgdConfig {
            weight_decay: -1.0,
            ..SgdConfig::new(0.1)
        };
        assert!(Sgd::new(cfg).is_err());
    }
}
