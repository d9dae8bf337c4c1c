//! Mean-field Gaussian weight posteriors.
//!
//! Each wrapped weight tensor carries trainable `(mu, rho)` with the positive
//! standard deviation recovered as `sigma_theta = softplus(rho)`, plus a
//! frozen snapshot of the pretrained value `theta0` and a prior scale `sigma`
//! defining `P(theta) = N(theta0, sigma^2)`. Training samples weights with the
//! reparameterization trick and regularizes with the closed-form KL
//! `KL(Q || P)` summed over elements.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tape::{NodeId, Tape};
use crate::tensor::{softplus, softplus_inv, NumArray};

/// Gaussian variational posterior over one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParameter {
    /// Posterior mean; initialized to `theta0` exactly.
    pub mu: NumArray,
    /// Unconstrained pre-sigma; `sigma_theta = softplus(rho)`.
    pub rho: NumArray,
    /// Frozen pretrained snapshot `theta0`.
    pub prior_mean: NumArray,
    /// Prior standard deviation `sigma`.
    pub prior_sigma: f64,
}

/// One reparameterized draw together with the unit normals that produced it.
#[derive(Debug, Clone)]
pub struct PosteriorSample {
    pub theta: NumArray,
    pub eps_used: NumArray,
}

pub fn init_variational(theta0: &NumArray, sigma_init: f64, prior_sigma: f64) -> Result<VariationalParameter> {
    if sigma_init <= 0.0 || !sigma_init.is_finite() {
        return Err(Error::Contract(format!("sigma_init must be positive, got {sigma_init}")));
    }
    if prior_sigma <= 0.0 || !prior_sigma.is_finite() {
        return Err(Error::Contract(format!("prior_sigma must be positive, got {prior_sigma}")));
    }
    let (r, c) = theta0.shape();
    Ok(VariationalParameter {
        mu: theta0.clone(),
        rho: NumArray::filled(r, c, softplus_inv(sigma_init)),
        prior_mean: theta0.clone(),
        prior_sigma,
    })
}

impl VariationalParameter {
    /// Elementwise posterior standard deviation.
    pub fn sigma_theta(&self) -> NumArray {
        self.rho.map(softplus)
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// Draws `theta = mu + softplus(rho) * eps` with `eps ~ N(0, I)`.
pub fn sample_param(vp: &VariationalParameter, rng: &mut ChaCha8Rng) -> PosteriorSample {
    let (r, c) = vp.mu.shape();
    let eps = standard_normal(r, c, rng);
    let theta = vp
        .mu
        .add(&vp.sigma_theta().mul(&eps).expect("same shape"))
        .expect("same shape");
    PosteriorSample { theta, eps_used: eps }
}

/// Closed-form `KL(Q || P)` with `Q = N(mu, softplus(rho)^2)` and
/// `P = N(theta0, sigma^2)`, summed over elements. Always non-negative.
pub fn kl_to_prior(vp: &VariationalParameter) -> f64 {
    let sigma = vp.prior_sigma;
    let mut total = 0.0;
    for i in 0..vp.mu.len() {
        let st = softplus(vp.rho.data()[i]);
        let d = vp.mu.data()[i] - vp.prior_mean.data()[i];
        total += (sigma / st).ln() + (st * st + d * d) / (2.0 * sigma * sigma) - 0.5;
    }
    total
}

/// `L = E[L_DM] + lambda * L_r` combination; `lambda = 0` degenerates to the
/// pure expected diffusion loss.
pub fn combined_loss(ldm_sample: f64, lr: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Contract(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(ldm_sample + lambda * lr)
}

/// Inference-time weight: the posterior mean, no randomness consumed.
pub fn mean_mode(vp: &VariationalParameter) -> NumArray {
    vp.mu.clone()
}

/// Nodes created when a variational parameter is placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundVariational {
    pub mu: NodeId,
    pub rho: NodeId,
    /// The weight value used downstream (sampled or mean).
    pub theta: NodeId,
}

/// Puts `(mu, rho)` on the tape as leaves and builds the sampled weight
/// `theta = mu + softplus(rho) * eps` so gradients flow into both leaves.
/// With `eps = None` the mean is used (inference path on a tape).
pub fn bind_on_tape(tape: &mut Tape, vp: &VariationalParameter, eps: Option<&NumArray>) -> BoundVariational {
    let mu = tape.leaf(vp.mu.clone());
    let rho = tape.leaf(vp.rho.clone());
    let theta = match eps {
        Some(e) => {
            let sigma = tape.softplus(rho);
            let e_node = tape.constant(e.clone());
            let noise = tape.mul(sigma, e_node).expect("same shape");
            tape.add(mu, noise).expect("same shape")
        }
        None => mu,
    };
    BoundVariational { mu, rho, theta }
}

/// Closed-form KL as a tape node over the `(mu, rho)` leaves:
/// `sum(ln sigma - ln softplus(rho) + (softplus(rho)^2 + (mu - theta0)^2) / (2 sigma^2) - 1/2)`.
pub fn kl_on_tape(tape: &mut Tape, bound: &BoundVariational, prior_mean: &NumArray, prior_sigma: f64) -> NodeId {
    let sigma_node = tape.softplus(bound.rho);
    let ln_sigma = tape.ln(sigma_node);
    let neg_ln_sigma = tape.scale(ln_sigma, -1.0);
    let prior = tape.constant(prior_mean.clone());
    let diff = tape.sub(bound.mu, prior).expect("same shape");
    let diff_sq = tape.mul(diff, diff).expect("same shape");
    let sig_sq = tape.mul(sigma_node, sigma_node).expect("same shape");
    let quad = tape.add(sig_sq, diff_sq).expect("same shape");
    let quad_scaled = tape.scale(quad, 1.0 / (2.0 * prior_sigma * prior_sigma));
    let inner = tape.add(neg_ln_sigma, quad_scaled).expect("same shape");
    let shifted = tape.add_scalar(inner, prior_sigma.ln() - 0.5);
    tape.sum(shifted)
}
