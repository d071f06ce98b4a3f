//! First-order optimizers over lists of parameter vectors, and the cosine
//! learning-rate schedule shared by all training loops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    /// SGD momentum; ignored by the Adam family.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            momentum: 0.0,
            betas,
            eps,
            weight_decay,
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            momentum: 0.0,
            betas: default_betas(),
            eps: default_adam_eps(),
            weight_decay,
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            momentum,
            betas: default_betas(),
            eps: default_adam_eps(),
            weight_decay,
        }
    }
}

/// Optimizer state; one moment buffer per parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], lr: f64) {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.cfg.kind != OptimizerKind::Sgd {
                self.second = self.first.clone();
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[k];
            match c.kind {
                OptimizerKind::Sgd => {
                    for i in 0..p.len() {
                        let gi = g[i] + c.weight_decay * p[i];
                        m[i] = c.momentum * m[i] + gi;
                        p[i] -= lr * m[i];
                    }
                }
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let v = &mut self.second[k];
                    let (b1, b2) = c.betas;
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    let decoupled = c.kind == OptimizerKind::Adamw;
                    for i in 0..p.len() {
                        let mut gi = g[i];
                        if decoupled {
                            p[i] *= 1.0 - lr * c.weight_decay;
                        } else {
                            gi += c.weight_decay * p[i];
                        }
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

impl Schedule {
    pub fn lr(self, step: usize, total_steps: usize, base_lr: f64, min_lr: f64, cycles: usize) -> Result<f64> {
        match self {
            Schedule::Cosine => cosine_lr(step, total_steps, base_lr, min_lr, cycles),
            Schedule::Constant if step > total_steps => Err(Error::Range {
                step,
                total: total_steps,
            }),
            Schedule::Constant => Ok(base_lr),
        }
    }
}

/// Cosine annealing with `cycles` half-cosine cycles over `total_steps`;
/// every cycle restarts at `base_lr` and decays to `min_lr`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64, cycles: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Range {
            step,
            total: total_steps,
        });
    }
    if cycles == 0 || total_steps == 0 {
        return Ok(base_lr);
    }
    let period = total_steps as f64 / cycles as f64;
    let pos = step as f64;
    // the final step belongs to the last cycle and lands exactly on min_lr
    let k = ((pos / period).floor() as usize).min(cycles - 1);
    let t = (pos - k as f64 * period) / period;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}
