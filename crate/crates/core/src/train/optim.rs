use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::nn::Param;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
    Sgd { lr: f64, momentum: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer with per-parameter state that persists across steps. Parameters
/// are matched to their state by position, so every call must pass the same
/// parameter list in the same order.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Element = f32> {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn ensure_state(&mut self, params: &[&mut Param<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        let matches = self.first.len() == params.len()
            && self.first.iter().zip(params).all(|(s, p)| s.len() == p.value.len());
        if matches {
            Ok(())
        } else {
            Err(TrainError::Config("parameter list changed between optimizer steps".into()))
        }
    }

    /// Applies one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        self.ensure_state(params)?;
        self.step += 1;
        match self.config {
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = T::from_f64_lossy(1.0 / (1.0 - beta1.powi(t)));
                let c2 = T::from_f64_lossy(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(eps));
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let grads = p.grad.data().to_vec();
                    for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grads).zip(m).zip(v) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let m_hat = *m * c1;
                        let v_hat = *v * c2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerConfig::Sgd { lr, momentum } => {
                let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    let grads = p.grad.data().to_vec();
                    for ((w, g), v) in p.value.data_mut().iter_mut().zip(grads).zip(vel) {
                        *v = mu * *v - lr * g;
                        *w = *w + *v;
                    }
                }
            }
        }
        Ok(())
    }
}
