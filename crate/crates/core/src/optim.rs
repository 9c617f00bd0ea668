//! First-order optimizers over a model's parameter list.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd {
        #[serde(default = "default_sgd_lr")]
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_adam_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_sgd_lr() -> f64 {
    0.05
}
fn default_adam_lr() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self::adam(default_adam_lr())
    }
}

impl OptimizerSpec {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerSpec::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerSpec::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { lr, .. } | OptimizerSpec::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerSpec::Sgd { lr, momentum } => lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&momentum),
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for a fixed parameter list. Slots are matched by
/// position, so a new optimizer is needed whenever the list changes shape.
#[derive(Debug, Clone)]
pub struct Optimizer {
    spec: OptimizerSpec,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one descent step. `grads[i] = None` leaves `params[i]` and its
    /// state untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() || self.first.iter().zip(&params).any(|(s, p)| s.len() != p.len()) {
            return Err(invalid("parameter list changed under the optimizer"));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(invalid(format!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            match self.spec {
                OptimizerSpec::Sgd { lr, momentum } => {
                    let v = &mut self.first[i];
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *w -= lr * *vi;
                    }
                }
                OptimizerSpec::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
