//! Analytic Gaussian model of a fine-tuned denoiser.
//!
//! The fine-tuned model is approximated as believing the clean data sits in
//! an isotropic Gaussian of spread `sigma1` around a small anchor set. Under
//! this belief the posterior over the clean sample given a noisy one is
//! Gaussian with a closed-form mean and variance, and the gap between the
//! posterior mean and the anchor is a linear amplification of the
//! off-manifold component of the input. The module doubles as a calculator
//! (closed forms, probes) and as an oracle against trained models via
//! [`estimate_sigma1`].

use rand_chacha::ChaCha8Rng;

use crate::diffusion::{predict_x0, Denoiser};
use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::schedule::NoiseSchedule;
use crate::tensor::NumArray;

/// Anchor set plus confidence, bound to a schedule.
#[derive(Debug, Clone)]
pub struct GaussianWorldModel {
    pub anchors: Vec<NumArray>,
    /// Spread of the learned distribution around each anchor; `0` means a
    /// perfect overfit, `f64::INFINITY` a model that only rescales input.
    pub sigma1: f64,
    pub sched: NoiseSchedule,
}

/// Posterior of the clean sample given a noisy one: isotropic Gaussian.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: NumArray,
    pub variance: f64,
}

impl GaussianWorldModel {
    pub fn new(anchors: Vec<NumArray>, sigma1: f64, sched: NoiseSchedule) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Contract("world model needs at least one anchor".into()));
        }
        if sigma1 < 0.0 {
            return Err(Error::Contract(format!("sigma1 must be non-negative, got {sigma1}")));
        }
        Ok(GaussianWorldModel { anchors, sigma1, sched })
    }

    fn check_t(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.sched.t_max() {
            return Err(Error::Contract(format!(
                "world model queries need 1 <= t <= {}, got {t}",
                self.sched.t_max()
            )));
        }
        Ok(self.sched.alpha_bar(t))
    }

    /// Index of the anchor minimizing the error-term norm; ties break to the
    /// lowest index.
    pub fn nearest_anchor(&self, x_t: &NumArray, t: usize) -> Result<usize> {
        let abar = self.check_t(t)?;
        let mut best = 0;
        let mut best_norm = f64::INFINITY;
        for (i, anchor) in self.anchors.iter().enumerate() {
            let norm = error_term_at(x_t, anchor, self.sigma1, abar)?.l2_norm();
            if norm < best_norm {
                best_norm = norm;
                best = i;
            }
        }
        Ok(best)
    }

    /// Posterior over the clean sample: nearest anchor plus its error term,
    /// with the closed-form isotropic variance.
    pub fn posterior_x0(&self, x_t: &NumArray, t: usize) -> Result<PosteriorGaussian> {
        let abar = self.check_t(t)?;
        let idx = self.nearest_anchor(x_t, t)?;
        posterior_at(&self.anchors[idx], x_t, self.sigma1, abar)
    }

    /// Joint covariance of `(x0, x_t)` in the scalar-data case, positive
    /// cross-covariance branch.
    pub fn joint_covariance(&self, t: usize) -> Result<NumArray> {
        let abar = self.check_t(t)?;
        let s2 = self.sigma1 * self.sigma1;
        let c = abar.sqrt() * s2;
        NumArray::new(2, 2, vec![s2, c, c, abar * s2 + 1.0 - abar]).map_err(Into::into)
    }

    /// Closed-form prediction for the scaled-anchor probe `x_t = k x'`
    /// (single-anchor protocol): `x0_hat = (1 + amp * (k - sqrt(abar))) x'`.
    pub fn scale_probe_prediction(&self, k: f64, t: usize) -> Result<NumArray> {
        if self.anchors.len() != 1 {
            return Err(Error::Contract(format!(
                "scale probe prediction is defined for a single anchor, got {}",
                self.anchors.len()
            )));
        }
        let abar = self.check_t(t)?;
        let amp = amplification_at(self.sigma1, abar);
        Ok(self.anchors[0].scale(1.0 + amp * (k - abar.sqrt())))
    }

    /// Amplification factor at step `t`.
    pub fn amplification(&self, t: usize) -> Result<f64> {
        let abar = self.check_t(t)?;
        Ok(amplification_at(self.sigma1, abar))
    }
}

/// `k(sigma1, abar) = sqrt(abar) sigma1^2 / (abar sigma1^2 + 1 - abar)`.
///
/// Monotone increasing in `sigma1`, zero at `sigma1 = 0`, and approaching
/// `1/sqrt(abar)` as `sigma1 -> inf`.
pub fn amplification_at(sigma1: f64, abar: f64) -> f64 {
    if sigma1.is_infinite() {
        return 1.0 / abar.sqrt();
    }
    let s2 = sigma1 * sigma1;
    abar.sqrt() * s2 / (abar * s2 + 1.0 - abar)
}

/// Spec signature wrapper over [`amplification_at`].
pub fn amplification(sigma1: f64, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t == 0 || t > sched.t_max() {
        return Err(Error::Contract(format!("amplification needs 1 <= t <= {}, got {t}", sched.t_max())));
    }
    Ok(amplification_at(sigma1, sched.alpha_bar(t)))
}

/// Error term `k * (x_t - sqrt(abar) x')`: the gap between the model's
/// posterior-mean clean sample and the anchor.
pub fn error_term_at(x_t: &NumArray, anchor: &NumArray, sigma1: f64, abar: f64) -> Result<NumArray> {
    let off_manifold = x_t.sub(&anchor.scale(abar.sqrt()))?;
    Ok(off_manifold.scale(amplification_at(sigma1, abar)))
}

/// Spec signature wrapper over [`error_term_at`].
pub fn error_term(x_t: &NumArray, anchor: &NumArray, sigma1: f64, t: usize, sched: &NoiseSchedule) -> Result<NumArray> {
    Ok(error_term_at(x_t, anchor, sigma1, sched.alpha_bar(t))?)
}

/// Posterior variance `sigma1^2 (1 - abar) / (abar sigma1^2 + 1 - abar)`.
///
/// This is the exact Gaussian-conditioning variance of the joint model (see
/// [`GaussianWorldModel::joint_covariance`]): it vanishes for a perfectly
/// overfit model and approaches the likelihood-only value `(1 - abar)/abar`
/// as the confidence spread grows.
pub fn posterior_variance_at(sigma1: f64, abar: f64) -> f64 {
    if sigma1.is_infinite() {
        return (1.0 - abar) / abar;
    }
    let s2 = sigma1 * sigma1;
    s2 * (1.0 - abar) / (abar * s2 + 1.0 - abar)
}

/// Posterior for one anchor at explicit `abar`.
pub fn posterior_at(anchor: &NumArray, x_t: &NumArray, sigma1: f64, abar: f64) -> Result<PosteriorGaussian> {
    let mean = anchor.add(&error_term_at(x_t, anchor, sigma1, abar)?)?;
    Ok(PosteriorGaussian { mean, variance: posterior_variance_at(sigma1, abar) })
}

/// Anything that can invert a noisy sample to a clean estimate at step `t`.
pub trait PredictsX0 {
    fn predict_x0(&self, x_t: &NumArray, t: usize) -> Result<NumArray>;
}

impl PredictsX0 for GaussianWorldModel {
    fn predict_x0(&self, x_t: &NumArray, t: usize) -> Result<NumArray> {
        Ok(self.posterior_x0(x_t, t)?.mean)
    }
}

/// A denoiser fixed to one conditioning label.
pub struct DenoiserPredictor<'a> {
    pub den: &'a Denoiser<'a>,
    pub label: usize,
}

impl PredictsX0 for DenoiserPredictor<'_> {
    fn predict_x0(&self, x_t: &NumArray, t: usize) -> Result<NumArray> {
        predict_x0(self.den, x_t, t, self.label)
    }
}

/// Fits the world model's confidence to a predictor.
///
/// For each of `n_samples` draws `x_t ~ N(0, (1 - abar) I)`: predict `x0`,
/// project the prediction error onto the off-manifold direction to get the
/// scalar `k_hat` minimizing `|(x0_hat - x') - k (x_t - sqrt(abar) x')|^2`,
/// and invert `sigma1^2 = k_hat (1 - abar) / (sqrt(abar) - k_hat * abar)`.
/// Negative inversions clamp to 0; `k_hat >= 1/sqrt(abar)` maps to the
/// `+inf` sentinel. Returns the median over draws.
pub fn estimate_sigma1(
    predictor: &dyn PredictsX0,
    anchor: &NumArray,
    t: usize,
    n_samples: usize,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if t == 0 || t > sched.t_max() {
        return Err(Error::Contract(format!("estimate_sigma1 needs 1 <= t <= {}, got {t}", sched.t_max())));
    }
    if n_samples == 0 {
        return Err(Error::Contract("estimate_sigma1 needs n_samples >= 1".into()));
    }
    let abar = sched.alpha_bar(t);
    let sqrt_abar = abar.sqrt();
    let mut estimates = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x_t = standard_normal(anchor.rows(), anchor.cols(), rng).scale((1.0 - abar).sqrt());
        let x0_hat = predictor.predict_x0(&x_t, t)?;
        let direction = x_t.sub(&anchor.scale(sqrt_abar))?;
        let denom = direction.sq_sum();
        let k_hat = if denom == 0.0 {
            0.0
        } else {
            x0_hat.sub(anchor)?.dot(&direction)? / denom
        };
        estimates.push(invert_amplification(k_hat, abar));
    }
    estimates.sort_by(|a, b| a.partial_cmp(b).expect("no NaN by construction"));
    let n = estimates.len();
    let median = if n % 2 == 1 {
        estimates[n / 2]
    } else {
        0.5 * (estimates[n / 2 - 1] + estimates[n / 2])
    };
    Ok(median)
}

/// Inverts `k = sqrt(abar) s2 / (abar s2 + 1 - abar)` for `sigma1`, with the
/// clamping rules described on [`estimate_sigma1`].
pub fn invert_amplification(k_hat: f64, abar: f64) -> f64 {
    let sqrt_abar = abar.sqrt();
    if k_hat <= 0.0 {
        return 0.0;
    }
    if k_hat >= 1.0 / sqrt_abar {
        return f64::INFINITY;
    }
    let s2 = k_hat * (1.0 - abar) / (sqrt_abar - k_hat * abar);
    if s2 < 0.0 {
        0.0
    } else {
        s2.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn sched() -> NoiseSchedule {
        make_schedule(1000, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn amplification_extremes_and_hand_value() {
        assert_eq!(amplification_at(0.0, 0.5), 0.0);
        let abar = 0.37;
        assert!((amplification_at(f64::INFINITY, abar) - 1.0 / abar.sqrt()).abs() < 1e-15);
        // abar = 0.25, sigma1 = 2 -> 0.5 * 4 / (1 + 0.75) = 8/7
        assert!((amplification_at(2.0, 0.25) - 8.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn amplification_monotone_and_bounded() {
        for &abar in &[0.1, 0.5, 0.9] {
            let mut last = -1.0;
            for s in [0.0, 0.2, 0.5, 1.0, 2.0, 5.0, 50.0] {
                let k = amplification_at(s, abar);
                assert!(k >= last);
                assert!(k <= 1.0 / abar.sqrt() + 1e-12);
                last = k;
            }
        }
    }

    #[test]
    fn error_term_cases() {
        let anchor = NumArray::col(vec![1.0, -2.0]);
        let abar = 0.49f64;
        // On-manifold input: zero error term.
        let x_on = anchor.scale(abar.sqrt());
        let e = error_term_at(&x_on, &anchor, 1.3, abar).unwrap();
        assert!(e.max_abs() < 1e-15);
        // sigma1 = 0: zero for any input.
        let x_any = NumArray::col(vec![3.0, 7.0]);
        let e0 = error_term_at(&x_any, &anchor, 0.0, abar).unwrap();
        assert!(e0.max_abs() == 0.0);
        // Additive perturbation contributes k * delta.
        let delta = NumArray::col(vec![0.1, -0.3]);
        let e1 = error_term_at(&x_any, &anchor, 1.3, abar).unwrap();
        let e2 = error_term_at(&x_any.add(&delta).unwrap(), &anchor, 1.3, abar).unwrap();
        let k = amplification_at(1.3, abar);
        assert!(e2.sub(&e1).unwrap().max_abs_diff(&delta.scale(k)) < 1e-12);
    }

    #[test]
    fn posterior_hand_value() {
        // x' = 0, sigma1 = 1, abar = 0.5, x_t = 1 -> mean 0.70711, var 0.5
        let p = posterior_at(&NumArray::scalar(0.0), &NumArray::scalar(1.0), 1.0, 0.5).unwrap();
        assert!((p.mean.scalar_value() - 0.5f64.sqrt()).abs() < 1e-9);
        assert!((p.variance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_variance_limits() {
        for &abar in &[0.1f64, 0.5, 0.9] {
            assert_eq!(posterior_variance_at(0.0, abar), 0.0);
            let mut last = 0.0;
            for &s in &[0.3, 1.0, 10.0, 1e6] {
                let v = posterior_variance_at(s, abar);
                assert!(v > last, "variance grows with confidence spread");
                assert!(v < (1.0 - abar) / abar + 1e-12);
                last = v;
            }
            let cap = (1.0 - abar) / abar;
            assert!((posterior_variance_at(f64::INFINITY, abar) - cap).abs() < 1e-15);
        }
    }

    /// Brute-force grid posterior on [-10, 10], step 1e-3.
    fn grid_posterior(anchor: f64, x_t: f64, sigma1: f64, abar: f64) -> (f64, f64) {
        let step = 1e-3;
        let n = (20.0 / step) as usize + 1;
        let mut w_sum = 0.0;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        let lik_var = 1.0 - abar;
        for i in 0..n {
            let x0 = -10.0 + i as f64 * step;
            let lp = -((x0 - anchor) * (x0 - anchor)) / (2.0 * sigma1 * sigma1)
                - ((x_t - abar.sqrt() * x0) * (x_t - abar.sqrt() * x0)) / (2.0 * lik_var);
            let w = lp.exp();
            w_sum += w;
            m1 += w * x0;
            m2 += w * x0 * x0;
        }
        let mean = m1 / w_sum;
        (mean, m2 / w_sum - mean * mean)
    }

    #[test]
    fn posterior_matches_grid_oracle() {
        let (mean, var) = grid_posterior(0.0, 1.0, 1.0, 0.5);
        let p = posterior_at(&NumArray::scalar(0.0), &NumArray::scalar(1.0), 1.0, 0.5).unwrap();
        assert!((p.mean.scalar_value() - mean).abs() < 1e-3, "{mean}");
        assert!((p.variance - var).abs() < 1e-3, "{var}");
    }

    #[test]
    fn nearest_anchor_matches_brute_force_and_handles_duplicates() {
        let s = sched();
        let mut rng = seeded_rng(41);
        let anchors: Vec<NumArray> = (0..7).map(|_| standard_normal(3, 1, &mut rng)).collect();
        let wm = GaussianWorldModel::new(anchors.clone(), 1.5, s.clone()).unwrap();
        for trial in 0..20 {
            let x_t = standard_normal(3, 1, &mut rng);
            let t = 100 + trial * 37;
            let got = wm.nearest_anchor(&x_t, t).unwrap();
            let abar = s.alpha_bar(t);
            let brute = anchors
                .iter()
                .enumerate()
                .map(|(i, a)| (i, error_term_at(&x_t, a, 1.5, abar).unwrap().l2_norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(got, brute);

            // Appending duplicates keeps the first index winning.
            let mut dup = anchors.clone();
            dup.extend(anchors.iter().cloned());
            let wm_dup = GaussianWorldModel::new(dup, 1.5, s.clone()).unwrap();
            assert_eq!(wm_dup.nearest_anchor(&x_t, t).unwrap(), got);
        }
    }

    #[test]
    fn nearest_anchor_exact_hits() {
        let s = sched();
        let anchors = vec![NumArray::col(vec![1.0, 0.0]), NumArray::col(vec![0.0, 1.0])];
        let wm = GaussianWorldModel::new(anchors.clone(), 2.0, s.clone()).unwrap();
        let t = 300;
        let x_t = anchors[1].scale(s.sqrt_alpha_bar(t));
        assert_eq!(wm.nearest_anchor(&x_t, t).unwrap(), 1);
        // Singleton always selects index 0.
        let wm1 = GaussianWorldModel::new(vec![anchors[0].clone()], 2.0, s).unwrap();
        assert_eq!(wm1.nearest_anchor(&x_t, t).unwrap(), 0);
    }

    #[test]
    fn joint_covariance_cases() {
        let s = sched();
        let t = 200;
        let abar = s.alpha_bar(t);
        // sigma1 = 0 degenerates to [[0,0],[0,1-abar]].
        let wm0 = GaussianWorldModel::new(vec![NumArray::scalar(0.3)], 0.0, s.clone()).unwrap();
        let j0 = wm0.joint_covariance(t).unwrap();
        assert_eq!(j0.get(0, 0), 0.0);
        assert_eq!(j0.get(0, 1), 0.0);
        assert!((j0.get(1, 1) - (1.0 - abar)).abs() < 1e-15);

        // Conditioning the joint on x_t reproduces the posterior mean/variance.
        let sigma1 = 1.7;
        let wm = GaussianWorldModel::new(vec![NumArray::scalar(0.3)], sigma1, s).unwrap();
        let j = wm.joint_covariance(t).unwrap();
        let anchor = 0.3;
        let x_t = 0.9;
        // Gaussian conditioning: mean = mu0 + c / var_t (x_t - mu_t).
        let mu_t = abar.sqrt() * anchor;
        let cond_mean = anchor + j.get(0, 1) / j.get(1, 1) * (x_t - mu_t);
        let cond_var = j.get(0, 0) - j.get(0, 1) * j.get(0, 1) / j.get(1, 1);
        let p = posterior_at(&NumArray::scalar(anchor), &NumArray::scalar(x_t), sigma1, abar).unwrap();
        assert!((p.mean.scalar_value() - cond_mean).abs() < 1e-12);
        assert!((p.variance - cond_var).abs() < 1e-12);

        // Conditional P(x_t | x0 = x') from the joint has variance 1 - abar.
        let var_xt_given_x0 = j.get(1, 1) - j.get(0, 1) * j.get(0, 1) / j.get(0, 0);
        assert!((var_xt_given_x0 - (1.0 - abar)).abs() < 1e-12);
    }

    #[test]
    fn scale_probe_prediction_cases() {
        let s = sched();
        let t = 150;
        let abar = s.alpha_bar(t);
        let anchor = NumArray::col(vec![0.8, -0.4]);
        let wm = GaussianWorldModel::new(vec![anchor.clone()], 1.2, s.clone()).unwrap();
        // k = sqrt(abar): on-manifold, returns the anchor exactly.
        let on = wm.scale_probe_prediction(abar.sqrt(), t).unwrap();
        assert!(on.max_abs_diff(&anchor) < 1e-12);
        // sigma1 = 0: anchor for every k.
        let wm0 = GaussianWorldModel::new(vec![anchor.clone()], 0.0, s.clone()).unwrap();
        for k in [0.0, 0.5, 2.0] {
            assert!(wm0.scale_probe_prediction(k, t).unwrap().max_abs_diff(&anchor) < 1e-15);
        }
        // k = 0 is the zero-input probe: (1 - amp sqrt(abar)) x'.
        let z = wm.scale_probe_prediction(0.0, t).unwrap();
        let amp = amplification_at(1.2, abar);
        assert!(z.max_abs_diff(&anchor.scale(1.0 - amp * abar.sqrt())) < 1e-12);
        // Multi-anchor is a contract error.
        let wm2 = GaussianWorldModel::new(vec![anchor.clone(), anchor], 1.0, s).unwrap();
        assert!(wm2.scale_probe_prediction(0.0, t).is_err());
    }

    #[test]
    fn estimate_sigma1_round_trips_through_the_world_model() {
        // A predictor that IS the world model recovers sigma1.
        let s = sched();
        let anchor = NumArray::col(vec![0.6, -1.0, 0.2]);
        for &sigma1 in &[0.5, 2.0] {
            let wm = GaussianWorldModel::new(vec![anchor.clone()], sigma1, s.clone()).unwrap();
            let mut rng = seeded_rng(51);
            let est = estimate_sigma1(&wm, &anchor, 400, 31, &s, &mut rng).unwrap();
            assert!((est - sigma1).abs() < 1e-6, "sigma1={sigma1} est={est}");
        }
    }

    #[test]
    fn invert_amplification_hand_value_and_clamps() {
        // k = 8/7 at abar = 0.25 inverts to sigma1^2 = 4.
        let s = invert_amplification(8.0 / 7.0, 0.25);
        assert!((s * s - 4.0).abs() < 1e-9, "s^2 = {}", s * s);
        assert_eq!(invert_amplification(-0.3, 0.25), 0.0);
        assert_eq!(invert_amplification(2.0, 0.25), f64::INFINITY);
    }

    #[test]
    fn overfit_predictor_estimates_zero() {
        // Always returns the anchor -> k_hat = 0 -> sigma1 = 0.
        struct Overfit(NumArray);
        impl PredictsX0 for Overfit {
            fn predict_x0(&self, _x_t: &NumArray, _t: usize) -> Result<NumArray> {
                Ok(self.0.clone())
            }
        }
        let s = sched();
        let anchor = NumArray::col(vec![0.1, 0.9]);
        let mut rng = seeded_rng(52);
        let est = estimate_sigma1(&Overfit(anchor.clone()), &anchor, 250, 15, &s, &mut rng).unwrap();
        assert_eq!(est, 0.0);
    }
}
