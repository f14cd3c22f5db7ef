//! First-order optimizers over flat parameter slots.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    /// `p -= lr · g`
    Sgd {
        lr: f64,
    },
    /// Momentum-free adaptive step: `v = ρv + (1−ρ)g²; p -= lr · g / (√v + ε)`.
    RmsProp {
        lr: f64,
        decay: f64,
        eps: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn rmsprop(lr: f64) -> Self {
        OptimizerConfig::RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::RmsProp { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
    Adam,
}

impl OptimizerKind {
    /// The optimizer with its default constants and the given step size.
    pub fn with_lr(self, lr: f64) -> OptimizerConfig {
        match self {
            OptimizerKind::Sgd => OptimizerConfig::Sgd { lr },
            OptimizerKind::RmsProp => OptimizerConfig::rmsprop(lr),
            OptimizerKind::Adam => OptimizerConfig::adam(lr),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, slots: usize) -> Self {
        Optimizer {
            config,
            first: vec![Vec::new(); slots],
            second: vec![Vec::new(); slots],
            t: 0,
        }
    }

    /// Advances the step counter; call once per optimizer step before the
    /// per-slot updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(param.len(), grad.len());
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerConfig::RmsProp { lr, decay, eps } => {
                let v = &mut self.second[slot];
                if v.is_empty() {
                    v.resize(param.len(), 0.0);
                }
                for ((p, g), s) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
                    *s = decay * *s + (1.0 - decay) * g * g;
                    // bias-corrected second moment
                    let vhat = *s / (1.0 - decay.powi(self.t as i32));
                    *p -= lr * g / (vhat.sqrt() + eps);
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let m = &mut self.first[slot];
                if m.is_empty() {
                    m.resize(param.len(), 0.0);
                }
                let v = &mut self.second[slot];
                if v.is_empty() {
                    v.resize(param.len(), 0.0);
                }
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}
