//! SGD with momentum and layer-wise adaptive rate scaling (LARS), plus the
//! two learning-rate schedules used during pretraining. Schedules are pure
//! functions of the epoch, so serialized state resumes bit-identically.

use serde::{Deserialize, Serialize};

use super::layers::{Param, ParamKind};
use crate::{Error, Result};

/// Learning-rate schedule, evaluated per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// base * factor^-floor(epoch / every)
    StepDecay { factor: f64, every_epochs: usize },
    /// base * 0.5 * (1 + cos(pi * (epoch mod period) / period))
    CosineRestarts { period_epochs: usize },
}

impl Schedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::StepDecay {
                factor,
                every_epochs,
            } => base * factor.powi(-((epoch / every_epochs) as i32)),
            Schedule::CosineRestarts { period_epochs } => {
                let t = (epoch % period_epochs) as f64 / period_epochs as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Lars,
}

/// Optimizer hyperparameters. The two constructors encode the pretraining
/// defaults: SGD at 1e-3 with step decay, LARS at 0.4 with cosine restarts,
/// both with 1e-5 weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// LARS trust coefficient (eta).
    pub trust_coefficient: f64,
    pub trust_eps: f64,
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            schedule: Schedule::StepDecay {
                factor: 10.0,
                every_epochs: 30,
            },
            trust_coefficient: 1e-3,
            trust_eps: 1e-9,
        }
    }

    pub fn lars() -> Self {
        Self {
            kind: OptimizerKind::Lars,
            base_lr: 0.4,
            momentum: 0.9,
            weight_decay: 1e-5,
            schedule: Schedule::CosineRestarts { period_epochs: 30 },
            trust_coefficient: 1e-3,
            trust_eps: 1e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::invalid(
                "learning rate",
                format!("{} must be > 0", self.base_lr),
            ));
        }
        Ok(())
    }
}

/// Optimizer state: per-parameter velocity buffers, positionally aligned
/// with the parameter list handed to every step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    velocities: Vec<Vec<f64>>,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocities: Vec::new(),
        }
    }

    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.config.schedule.lr(self.config.base_lr, epoch)
    }

    /// One update over a fixed, ordered parameter list. Aborts without
    /// touching anything if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param], epoch: usize) -> Result<()> {
        for p in params.iter() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {}", p.name),
                });
            }
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer state",
                expected: format!("{} parameters", self.velocities.len()),
                got: format!("{}", params.len()),
            });
        }
        let lr = self.effective_lr(epoch);
        let cfg = self.config;
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            // normalization and bias parameters are excluded from trust
            // scaling and weight decay under LARS
            let excluded = cfg.kind == OptimizerKind::Lars && p.kind != ParamKind::Weight;
            let wd = if excluded { 0.0 } else { cfg.weight_decay };
            let local_lr = match cfg.kind {
                OptimizerKind::Sgd => 1.0,
                OptimizerKind::Lars => {
                    if excluded {
                        1.0
                    } else {
                        let w_norm = l2_norm(&p.data);
                        let g_norm = l2_norm(&p.grad);
                        if w_norm > 0.0 && g_norm > 0.0 {
                            cfg.trust_coefficient * w_norm
                                / (g_norm + wd * w_norm + cfg.trust_eps)
                        } else {
                            1.0
                        }
                    }
                }
            };
            for i in 0..p.data.len() {
                v[i] = cfg.momentum * v[i] + p.grad[i] + wd * p.data[i];
                p.data[i] -= lr * local_lr * v[i];
            }
        }
        Ok(())
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    pub fn restore_velocities(&mut self, velocities: Vec<Vec<f64>>) {
        self.velocities = velocities;
    }
}
