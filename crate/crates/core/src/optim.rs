//! Adam optimizer.
//!
//! Standard bias-corrected update: with gradient `g` at step `t`,
//!
//! ```text
//! m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
//! m_hat = m / (1 - b1^t)          v_hat = v / (1 - b2^t)
//! p <- p - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! with `b1 = 0.9`, `b2 = 0.999`, `eps = 1e-8`. Any implementation following
//! this arithmetic reproduces the same trajectories bit for bit.

use serde::{Deserialize, Serialize};

use crate::tensor::NumArray;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
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

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    moments: Vec<Option<(NumArray, NumArray)>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_slots: usize) -> Self {
        Adam { cfg, moments: vec![None; n_slots], t: 0 }
    }

    /// Advances the shared step counter; call once per optimization step
    /// before updating slots.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the update for one parameter slot in place.
    pub fn update_slot(&mut self, slot: usize, value: &mut NumArray, grad: &NumArray) {
        debug_assert!(self.t > 0, "begin_step must run before updates");
        let (r, c) = value.shape();
        let (m, v) = self.moments[slot].get_or_insert_with(|| (NumArray::zeros(r, c), NumArray::zeros(r, c)));
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.learning_rate;
        let eps = self.cfg.eps;
        for ((p, g), (mi, vi)) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = NumArray::col(vec![5.0, -3.0]);
        let target = NumArray::col(vec![1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.05), 1);
        for _ in 0..2000 {
            adam.begin_step();
            let grad = p.sub(&target).unwrap().scale(2.0);
            adam.update_slot(0, &mut p, &grad);
        }
        assert!(p.max_abs_diff(&target) < 1e-4, "{p:?}");
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut p = NumArray::col(vec![0.4]);
            let mut adam = Adam::new(AdamConfig::with_lr(0.01), 1);
            for i in 0..50 {
                adam.begin_step();
                let grad = NumArray::col(vec![(i as f64 * 0.37).sin()]);
                adam.update_slot(0, &mut p, &grad);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
