//! Discrete-time noise schedules for the forward diffusion process.
//!
//! The convention throughout is `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`
//! with `abar_t` the cumulative signal coefficient, `abar_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step beta ramp shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// beta from 1e-4 to 2e-2, linear in t.
    Linear,
    /// beta = (sqrt(8.5e-4) + (sqrt(1.2e-2) - sqrt(8.5e-4)) * t/(T-1))^2.
    ScaledLinear,
}

/// Cumulative signal coefficients `abar[0..=T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(t_max: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::Contract(format!("schedule needs T >= 2, got {t_max}")));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            let frac = i as f64 / (t_max - 1) as f64;
            match kind {
                ScheduleKind::Linear => 1e-4 + (2e-2 - 1e-4) * frac,
                ScheduleKind::ScaledLinear => {
                    let lo = 8.5e-4_f64.sqrt();
                    let hi = 1.2e-2_f64.sqrt();
                    let b = lo + (hi - lo) * frac;
                    b * b
                }
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for b in betas {
        prod *= 1.0 - b;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { kind, alpha_bar })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Cumulative signal coefficient at step `t`, `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }
}
