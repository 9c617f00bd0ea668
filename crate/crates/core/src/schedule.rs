//! Annealing coefficient `α_t` that moves the aEPG objective from
//! cross-entropy (`α = 1`) to EPG (`α = 0`).
//!
//! Step indices run `t = 0..=T`, so both endpoints `α_0` and `α_T` are
//! visited: a task with `n` optimizer steps uses `T = n - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_TAU: f64 = 6.0;

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `σ(τ (T - 2t) / T)`
    Sigmoid {
        #[serde(default = "default_tau")]
        tau: f64,
    },
    /// `(T - t) / T`
    Linear,
    /// `1/2 + 1/2 cos(π t / T)`
    Cosine,
    /// Fixed `α`.
    Constant { alpha: f64 },
}

impl ScheduleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Sigmoid { .. } => "sigmoid",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Constant { .. } => "constant",
        }
    }
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Sigmoid { tau: DEFAULT_TAU }
    }
}

/// Whether the step counter restarts at each task boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    PerTask,
    Global,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_task" => Ok(Scope::PerTask),
            "global" => Ok(Scope::Global),
            _ => Err(invalid(format!("unknown schedule scope {s:?}"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealState {
    kind: ScheduleKind,
    scope: Scope,
    t: usize,
    horizon: usize,
}

impl AnnealState {
    pub fn new(kind: ScheduleKind, scope: Scope, horizon: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Sigmoid { tau } if !(tau > 0.0) || !tau.is_finite() => {
                return Err(invalid(format!("sigmoid tau must be positive, got {tau}")))
            }
            ScheduleKind::Constant { alpha } if !(0.0..=1.0).contains(&alpha) => {
                return Err(invalid(format!("constant alpha must lie in [0, 1], got {alpha}")))
            }
            _ => {}
        }
        if horizon == 0 {
            return Err(invalid("schedule horizon T must be positive"));
        }
        Ok(Self {
            kind,
            scope,
            t: 0,
            horizon,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn step(&self) -> usize {
        self.t
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `α_t`, with `t` clamped to `T`.
    pub fn alpha(&self) -> f64 {
        alpha_at(self.kind, self.t.min(self.horizon), self.horizon)
    }

    /// Moves to the next step. Past `T`, `α` stays at `α_T`.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Task boundary. Per-task scope restarts at `t = 0` with horizon
    /// `task_horizon`; global scope ignores it.
    pub fn begin_task(&mut self, task_horizon: usize) -> Result<()> {
        if self.scope == Scope::PerTask {
            if task_horizon == 0 {
                return Err(invalid("schedule horizon T must be positive"));
            }
            self.t = 0;
            self.horizon = task_horizon;
        }
        Ok(())
    }
}

/// `α_t` for `0 <= t <= T`.
pub fn alpha_at(kind: ScheduleKind, t: usize, horizon: usize) -> f64 {
    let (t, big_t) = (t as f64, horizon as f64);
    match kind {
        ScheduleKind::Sigmoid { tau } => sigmoid(tau * (big_t - 2.0 * t) / big_t),
        ScheduleKind::Linear => (big_t - t) / big_t,
        ScheduleKind::Cosine => 0.5 + 0.5 * (std::f64::consts::PI * t / big_t).cos(),
        ScheduleKind::Constant { alpha } => alpha,
    }
}
