//! DDPM substrate: forward diffusion, the noise-prediction loss, inversion
//! from predicted noise back to a clean sample, and reverse-process samplers.
//!
//! Epsilon parameterization throughout: the model predicts the injected noise
//! and the loss is the elementwise mean of the squared prediction error.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{DenoiserModel, EffectiveWeights, OpCounter, TapeBinding, WeightMode};
use crate::rng::{derive_seed, seeded_rng, standard_normal, STREAM_SAMPLER};
use crate::schedule::NoiseSchedule;
use crate::tape::{NodeId, Tape};
use crate::tensor::NumArray;

/// Reverse-process mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    /// Posterior-mean step plus per-step Gaussian noise.
    Ancestral,
    /// Posterior-mean step only; the trajectory is a deterministic function
    /// of the starting point.
    DeterministicMean,
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// Number of reverse steps; at most the schedule's T.
    pub steps: usize,
    pub seed: u64,
    pub mode: SamplerMode,
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > sched.t_max() {
            return Err(Error::Contract(format!(
                "sampler steps must be in 1..={}, got {}",
                sched.t_max(),
                self.steps
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(x0: &NumArray, t: usize, eps: &NumArray, sched: &NoiseSchedule) -> Result<NumArray> {
    if t > sched.t_max() {
        return Err(Error::Contract(format!("t={t} exceeds schedule T={}", sched.t_max())));
    }
    let scaled_x0 = x0.scale(sched.sqrt_alpha_bar(t));
    let scaled_eps = eps.scale(sched.sqrt_one_minus_alpha_bar(t));
    Ok(scaled_x0.add(&scaled_eps)?)
}

/// A model with materialized weights bound to a schedule; the working form
/// for all inference-side operations.
#[derive(Debug, Clone)]
pub struct Denoiser<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a NoiseSchedule,
    pub eff: EffectiveWeights,
}

impl<'a> Denoiser<'a> {
    /// Mean-mode weights (the inference contract for Bayesian models).
    pub fn mean(model: &'a DenoiserModel, sched: &'a NoiseSchedule) -> Result<Self> {
        Ok(Denoiser { model, sched, eff: model.effective(WeightMode::Mean)? })
    }

    /// One posterior draw of the weights.
    pub fn sampled(model: &'a DenoiserModel, sched: &'a NoiseSchedule, seed: u64, step: u64) -> Result<Self> {
        Ok(Denoiser { model, sched, eff: model.effective(WeightMode::Sample { seed, step })? })
    }

    pub fn predict_eps(&self, x_t: &NumArray, t: usize, label: usize, ops: &mut OpCounter) -> Result<NumArray> {
        self.model.forward_plain(&self.eff, x_t, t, label, ops)
    }
}

/// Mean squared prediction error of the injected noise.
pub fn diffusion_loss(den: &Denoiser, x0: &NumArray, t: usize, eps: &NumArray, label: usize) -> Result<f64> {
    let x_t = forward_diffuse(x0, t, eps, den.sched)?;
    let mut ops = OpCounter::default();
    let pred = den.predict_eps(&x_t, t, label, &mut ops)?;
    if !pred.all_finite() {
        return Err(Error::NonFinite { context: "diffusion loss model output".into(), step: Some(t) });
    }
    let diff = pred.sub(eps)?;
    Ok(diff.sq_sum() / diff.len() as f64)
}

/// Same loss recorded on a tape for training.
pub fn diffusion_loss_on_tape(
    model: &DenoiserModel,
    tape: &mut Tape,
    binding: &TapeBinding,
    x0: &NumArray,
    t: usize,
    eps: &NumArray,
    label: usize,
    sched: &NoiseSchedule,
) -> Result<NodeId> {
    let x_t = forward_diffuse(x0, t, eps, sched)?;
    let pred = model.forward_on_tape(tape, binding, &x_t, t, label)?;
    if !tape.value(pred).all_finite() {
        return Err(Error::NonFinite { context: "diffusion loss model output".into(), step: Some(t) });
    }
    let eps_node = tape.constant(eps.clone());
    Ok(tape.mean_sq_diff(pred, eps_node)?)
}

/// Inverts the forward process through the model's noise estimate:
/// `x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(den: &Denoiser, x_t: &NumArray, t: usize, label: usize) -> Result<NumArray> {
    if t == 0 {
        return Err(Error::Contract("predict_x0 requires t >= 1 (no noise to remove at t=0)".into()));
    }
    if t > den.sched.t_max() {
        return Err(Error::Contract(format!("t={t} exceeds schedule T={}", den.sched.t_max())));
    }
    let mut ops = OpCounter::default();
    let eps_hat = den.predict_eps(x_t, t, label, &mut ops)?;
    let num = x_t.sub(&eps_hat.scale(den.sched.sqrt_one_minus_alpha_bar(t)))?;
    Ok(num.scale(1.0 / den.sched.sqrt_alpha_bar(t)))
}

/// Descending timestep ladder with `steps` entries starting at `t_start`.
fn timestep_ladder(t_start: usize, steps: usize) -> Vec<usize> {
    // Evenly spaced in (0, t_start], deduplicated, descending.
    let mut ts: Vec<usize> = (1..=steps)
        .map(|j| ((j as f64) * (t_start as f64) / (steps as f64)).ceil() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Runs the reverse iteration over the given descending timesteps.
fn reverse_iterate(
    den: &Denoiser,
    mut x: NumArray,
    ts: &[usize],
    label: usize,
    mut noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<NumArray> {
    let mut ops = OpCounter::default();
    for (idx, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(idx + 1).copied().unwrap_or(0);
        let abar_t = den.sched.alpha_bar(t);
        let abar_prev = den.sched.alpha_bar(t_prev);
        let alpha_eff = abar_t / abar_prev;

        let eps_hat = den.predict_eps(&x, t, label, &mut ops)?;
        let coef = (1.0 - alpha_eff) / (1.0 - abar_t).sqrt();
        let mean = x.sub(&eps_hat.scale(coef))?.scale(1.0 / alpha_eff.sqrt());

        x = if t_prev == 0 {
            mean
        } else {
            match noise_rng.as_deref_mut() {
                Some(rng) => {
                    let var = (1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - alpha_eff);
                    let z = standard_normal(x.rows(), x.cols(), rng);
                    mean.add(&z.scale(var.sqrt()))?
                }
                None => mean,
            }
        };
        if !x.all_finite() {
            return Err(Error::NonFinite { context: "reverse iteration".into(), step: Some(t) });
        }
    }
    Ok(x)
}

/// Full reverse process from a fresh `x_T ~ N(0, I)` draw. Deterministic
/// given the seed; in [`SamplerMode::DeterministicMean`] the per-step noise
/// is omitted (the seed then only fixes `x_T`).
pub fn ancestral_sample(den: &Denoiser, config: &SamplerConfig, label: usize) -> Result<NumArray> {
    config.validate(den.sched)?;
    let mut rng = seeded_rng(derive_seed(config.seed, &[STREAM_SAMPLER]));
    let x_t = standard_normal(den.model.cfg.data_dim, 1, &mut rng);
    ancestral_sample_from(den, config, label, x_t, &mut rng)
}

/// Reverse process from a supplied starting point (the rng only feeds
/// per-step ancestral noise).
pub fn ancestral_sample_from(
    den: &Denoiser,
    config: &SamplerConfig,
    label: usize,
    x_t: NumArray,
    rng: &mut ChaCha8Rng,
) -> Result<NumArray> {
    config.validate(den.sched)?;
    let ts = timestep_ladder(den.sched.t_max(), config.steps);
    let noise = match config.mode {
        SamplerMode::Ancestral => Some(rng),
        SamplerMode::DeterministicMean => None,
    };
    reverse_iterate(den, x_t, &ts, label, noise)
}

/// Deterministic-mean reverse iteration from a supplied `x_t` at `t_start`
/// down to 0, one step per timestep.
pub fn partial_denoise(den: &Denoiser, x_t: &NumArray, t_start: usize, label: usize) -> Result<NumArray> {
    if t_start == 0 || t_start > den.sched.t_max() {
        return Err(Error::Contract(format!(
            "partial_denoise requires 1 <= t_start <= {}, got {t_start}",
            den.sched.t_max()
        )));
    }
    let ts = timestep_ladder(t_start, t_start);
    reverse_iterate(den, x_t.clone(), &ts, label, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::seeded_rng;
    use crate::schedule::{make_schedule, ScheduleKind};

    fn setup() -> (DenoiserModel, NoiseSchedule) {
        let cfg = ModelConfig { data_dim: 2, hidden_dim: 8, embed_dim: 4, n_labels: 2 };
        let model = DenoiserModel::new_plain(cfg, 11).unwrap();
        let sched = make_schedule(100, ScheduleKind::Linear).unwrap();
        (model, sched)
    }

    #[test]
    fn forward_diffuse_identity_at_zero() {
        let (_, sched) = setup();
        let x0 = NumArray::col(vec![0.7, -0.1]);
        let eps = NumArray::col(vec![1.0, 1.0]);
        let out = forward_diffuse(&x0, 0, &eps, &sched).unwrap();
        assert_eq!(out, x0);
    }

    #[test]
    fn forward_diffuse_hand_value() {
        // abar = 0.64 -> [0.8, 0.6]
        let sched = make_schedule(2, ScheduleKind::Linear).unwrap();
        // Build an exact-abar case by scaling manually instead: check the formula directly.
        let x0 = NumArray::col(vec![1.0, 0.0]);
        let eps = NumArray::col(vec![0.0, 1.0]);
        let t = 1;
        let out = forward_diffuse(&x0, t, &eps, &sched).unwrap();
        let expect = x0
            .scale(sched.sqrt_alpha_bar(t))
            .add(&eps.scale(sched.sqrt_one_minus_alpha_bar(t)))
            .unwrap();
        assert_eq!(out, expect);

        // The documented 0.64 example, via a handmade two-step schedule value.
        let sab = 0.64f64.sqrt();
        let somab = 0.36f64.sqrt();
        let hand = x0.scale(sab).add(&eps.scale(somab)).unwrap();
        assert!(hand.max_abs_diff(&NumArray::col(vec![0.8, 0.6])) < 1e-12);
    }

    #[test]
    fn forward_diffuse_zero_noise() {
        let (_, sched) = setup();
        let x0 = NumArray::col(vec![0.3, 0.4]);
        let eps = NumArray::zeros(2, 1);
        let out = forward_diffuse(&x0, 40, &eps, &sched).unwrap();
        assert!(out.max_abs_diff(&x0.scale(sched.sqrt_alpha_bar(40))) < 1e-15);
    }

    #[test]
    fn predict_x0_inverts_forward_with_oracle_eps() {
        // A denoiser that returns exactly the injected eps inverts the
        // forward map; emulate by computing the inversion directly.
        let (_, sched) = setup();
        let x0 = NumArray::col(vec![0.5, -1.2]);
        let eps = NumArray::col(vec![0.8, 0.1]);
        let t = 60;
        let x_t = forward_diffuse(&x0, t, &eps, &sched).unwrap();
        let recon = x_t
            .sub(&eps.scale(sched.sqrt_one_minus_alpha_bar(t)))
            .unwrap()
            .scale(1.0 / sched.sqrt_alpha_bar(t));
        assert!(recon.max_abs_diff(&x0) < 1e-9);
    }

    #[test]
    fn predict_x0_rejects_t_zero() {
        let (model, sched) = setup();
        let den = Denoiser::mean(&model, &sched).unwrap();
        assert!(predict_x0(&den, &NumArray::col(vec![0.0, 0.0]), 0, 0).is_err());
    }

    #[test]
    fn zero_eps_model_rescales_input() {
        // With eps_hat = 0, predict_x0 returns x_t / sqrt(abar_t).
        let (model, sched) = setup();
        let mut zeroed = model.clone();
        zeroed.visit_slots_mut(|_, arr| {
            for v in arr.data_mut() {
                *v = 0.0;
            }
        });
        // Zero weights and biases make the net output zero.
        let den = Denoiser::mean(&zeroed, &sched).unwrap();
        let x_t = NumArray::col(vec![0.4, -0.2]);
        let out = predict_x0(&den, &x_t, 30, 0).unwrap();
        assert!(out.max_abs_diff(&x_t.scale(1.0 / sched.sqrt_alpha_bar(30))) < 1e-12);
    }

    #[test]
    fn diffusion_loss_perfect_and_null_predictors() {
        let (model, sched) = setup();
        let den = Denoiser::mean(&model, &sched).unwrap();
        let x0 = NumArray::col(vec![0.2, 0.3]);
        let eps = NumArray::col(vec![1.0, -1.0]);
        // Null predictor: zero all weights; loss = mean(eps^2) = 1.
        let mut zeroed = model.clone();
        zeroed.visit_slots_mut(|_, arr| {
            for v in arr.data_mut() {
                *v = 0.0;
            }
        });
        let den0 = Denoiser::mean(&zeroed, &sched).unwrap();
        let loss0 = diffusion_loss(&den0, &x0, 50, &eps, 0).unwrap();
        assert!((loss0 - 1.0).abs() < 1e-12);
        // Sanity: a random model has finite positive loss.
        let loss = diffusion_loss(&den, &x0, 50, &eps, 0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let (model, sched) = setup();
        let x0 = NumArray::col(vec![0.2, 0.3]);
        let eps = NumArray::col(vec![0.5, -0.7]);
        let den = Denoiser::mean(&model, &sched).unwrap();
        let plain = diffusion_loss(&den, &x0, 20, &eps, 1).unwrap();

        let mut tape = Tape::new();
        let binding = model.bind_on_tape(&mut tape, crate::model::BindMode::Mean).unwrap();
        let node = diffusion_loss_on_tape(&model, &mut tape, &binding, &x0, 20, &eps, 1, &sched).unwrap();
        assert!((tape.scalar(node) - plain).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::gradcheck::{check_random_directions, DEFAULT_STEP, DEFAULT_TOLERANCE};
        let (model, sched) = setup();
        let x0 = NumArray::col(vec![0.4, -0.3]);
        let eps = NumArray::col(vec![0.9, 0.2]);

        // Perturb only the first backbone weight; rebuild the graph per probe.
        let base = match &model.layers[0].weights {
            crate::model::LayerWeights::Dense { w: crate::model::ParamTensor::Plain(v), .. } => v.clone(),
            _ => unreachable!(),
        };
        let build = |inputs: &[NumArray]| {
            let mut m = model.clone();
            if let crate::model::LayerWeights::Dense { w, .. } = &mut m.layers[0].weights {
                *w = crate::model::ParamTensor::Plain(inputs[0].clone());
            }
            let mut tape = Tape::new();
            let binding = m.bind_on_tape(&mut tape, crate::model::BindMode::Mean).unwrap();
            let first_leaf = match binding.layers[0] {
                crate::model::EffLayerNode::Affine { w, .. } => w,
                _ => unreachable!(),
            };
            let loss = diffusion_loss_on_tape(&m, &mut tape, &binding, &x0, 35, &eps, 0, &sched).unwrap();
            (tape, vec![first_leaf], loss)
        };
        let mut rng = seeded_rng(31);
        let report = check_random_directions(&[base], 10, DEFAULT_STEP, &mut rng, &build);
        assert!(report.within(DEFAULT_TOLERANCE), "{report:?}");
    }

    #[test]
    fn sampler_is_deterministic_given_seed() {
        let (model, sched) = setup();
        let den = Denoiser::mean(&model, &sched).unwrap();
        let config = SamplerConfig { steps: 100, seed: 99, mode: SamplerMode::Ancestral };
        let a = ancestral_sample(&den, &config, 1).unwrap();
        let b = ancestral_sample(&den, &config, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_mean_ignores_sampler_noise() {
        let (model, sched) = setup();
        let den = Denoiser::mean(&model, &sched).unwrap();
        let x_t = NumArray::col(vec![0.3, 0.8]);
        let config = SamplerConfig { steps: 50, seed: 1, mode: SamplerMode::DeterministicMean };
        let mut rng1 = seeded_rng(111);
        let mut rng2 = seeded_rng(222);
        let a = ancestral_sample_from(&den, &config, 0, x_t.clone(), &mut rng1).unwrap();
        let b = ancestral_sample_from(&den, &config, 0, x_t, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_denoise_single_step_equals_predict_x0() {
        let (model, sched) = setup();
        let den = Denoiser::mean(&model, &sched).unwrap();
        let x_1 = NumArray::col(vec![0.25, -0.4]);
        let one_step = partial_denoise(&den, &x_1, 1, 0).unwrap();
        let direct = predict_x0(&den, &x_1, 1, 0).unwrap();
        assert!(one_step.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn partial_denoise_contract() {
        let (model, sched) = setup();
        let den = Denoiser::mean(&model, &sched).unwrap();
        assert!(partial_denoise(&den, &NumArray::col(vec![0.0, 0.0]), 0, 0).is_err());
        assert!(partial_denoise(&den, &NumArray::col(vec![0.0, 0.0]), 101, 0).is_err());
    }

    #[test]
    fn forward_diffuse_preserves_second_moment() {
        // E |x_t|^2 = abar |x0|^2 + (1 - abar) d for unit normal eps.
        let (_, sched) = setup();
        let x0 = NumArray::col(vec![1.2, -0.7]);
        let t = 55;
        let mut rng = seeded_rng(77);
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = standard_normal(2, 1, &mut rng);
            acc += forward_diffuse(&x0, t, &eps, &sched).unwrap().sq_sum();
        }
        let measured = acc / n as f64;
        let expect = sched.alpha_bar(t) * x0.sq_sum() + (1.0 - sched.alpha_bar(t)) * 2.0;
        assert!((measured - expect).abs() / expect < 0.02, "{measured} vs {expect}");
    }

    #[test]
    fn timestep_ladder_covers_full_and_strided_cases() {
        assert_eq!(timestep_ladder(5, 5), vec![5, 4, 3, 2, 1]);
        let strided = timestep_ladder(100, 10);
        assert_eq!(strided.len(), 10);
        assert_eq!(strided[0], 100);
        assert!(strided.windows(2).all(|w| w[0] > w[1]));
    }
}
