use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v ← μ·v + g`, `w ← w − lr·v`. `momentum = 0` is plain SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyper-parameters plus the per-parameter moment buffers.
///
/// Buffers are allocated lazily on the first step and must keep matching
/// the shapes of the parameter list passed to every later step.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        match kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::invalid(format!(
                    "momentum must lie in [0,1), got {momentum}"
                )))
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(Error::invalid("invalid Adam coefficients"))
            }
            _ => {}
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(index) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::MissingGradient { index });
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(b, p)| b.len() != p.len())
        {
            return Err(Error::invalid(
                "parameter list changed shape since the optimizer was initialised",
            ));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for (p, v) in params.iter_mut().zip(self.first.iter_mut()) {
                    let (w, g) = p.data_and_grad_mut();
                    for ((w, g), v) in w.iter_mut().zip(g.iter_mut()).zip(v.iter_mut()) {
                        *v = momentum * *v + *g;
                        *w -= lr * *v;
                        *g = 0.0;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), s) in params
                    .iter_mut()
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let (w, g) = p.data_and_grad_mut();
                    for (((w, g), m), s) in w
                        .iter_mut()
                        .zip(g.iter_mut())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * *g;
                        *s = beta2 * *s + (1.0 - beta2) * *g * *g;
                        *w -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                        *g = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, g: f64) -> Tensor {
        let mut t = Tensor::parameter(&[1]);
        t.data_mut()[0] = w;
        t.grad_mut().unwrap()[0] = g;
        t
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1).unwrap();
        let mut w = scalar(1.0, 0.5);
        opt.step(&mut [&mut w]).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(w.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn momentum_unrolls_by_hand() {
        let mut opt = OptimizerState::new(OptimizerKind::Sgd { momentum: 0.9 }, 0.1).unwrap();
        let mut w = scalar(1.0, 1.0);
        opt.step(&mut [&mut w]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
        w.grad_mut().unwrap()[0] = 1.0;
        opt.step(&mut [&mut w]).unwrap();
        // v = 0.9·1 + 1 = 1.9, w = 0.9 − 0.19
        assert!((w.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in [OptimizerKind::Sgd { momentum: 0.5 }, OptimizerKind::adam()] {
            let mut opt = OptimizerState::new(kind, 0.1).unwrap();
            let mut w = scalar(0.3, 0.0);
            opt.step(&mut [&mut w]).unwrap();
            assert_eq!(w.data()[0], 0.3);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3).unwrap();
        let mut w = scalar(1.0, 4.0);
        opt.step(&mut [&mut w]).unwrap();
        assert!((w.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3).unwrap();
        let mut a = scalar(1.0, 1.0);
        let mut b = Tensor::zeros(&[2]);
        let err = opt.step(&mut [&mut a, &mut b]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient { index: 1 }));
    }

    #[test]
    fn buffers_must_keep_matching_shapes() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 1e-3).unwrap();
        let mut a = scalar(1.0, 1.0);
        opt.step(&mut [&mut a]).unwrap();
        let mut b = Tensor::parameter(&[3]);
        assert!(opt.step(&mut [&mut b]).is_err());
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(OptimizerState::new(OptimizerKind::adam(), 0.0).is_err());
        assert!(OptimizerState::new(OptimizerKind::Sgd { momentum: 1.0 }, 0.1).is_err());
    }
}
