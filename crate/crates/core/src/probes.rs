//! Diagnostic probes: zero-input, localized noise injection, and scaled-anchor
//! input sweeps.
//!
//! Every record carries both the empirical measurement and, when a fitted
//! world model is supplied, the matching analytic value, so reports can plot
//! their gap directly. Records serialize to JSON lines.

use serde::{Deserialize, Serialize};

use crate::analytic::{amplification_at, GaussianWorldModel};
use crate::diffusion::{forward_diffuse, partial_denoise, predict_x0, Denoiser};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, standard_normal, STREAM_METRIC};
use crate::tensor::NumArray;

/// Result of denoising `x_t = 0` from `t_start`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroProbeRecord {
    pub t_start: usize,
    pub label: usize,
    pub output: Vec<f64>,
    pub dist_to_zero: f64,
    pub dist_to_nearest_train: f64,
    pub nearest_train_index: usize,
    /// Closed-form zero-input prediction from the world model, if supplied.
    pub analytic_prediction: Option<Vec<f64>>,
    /// L2 gap between the empirical output and the analytic prediction.
    pub analytic_gap: Option<f64>,
}

pub fn zero_probe(
    den: &Denoiser,
    t_start: usize,
    label: usize,
    training: &[NumArray],
    world: Option<&GaussianWorldModel>,
) -> Result<ZeroProbeRecord> {
    if training.is_empty() {
        return Err(Error::Contract("zero probe needs a non-empty training set".into()));
    }
    let zero = NumArray::zeros(den.model.cfg.data_dim, 1);
    let output = partial_denoise(den, &zero, t_start, label)?;
    let (nearest_train_index, dist_to_nearest_train) = training
        .iter()
        .enumerate()
        .map(|(i, x)| (i, output.sub(x).expect("same shape").l2_norm()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
        .expect("non-empty training set");

    let analytic = match world {
        Some(wm) => Some(wm.scale_probe_prediction(0.0, t_start)?),
        None => None,
    };
    let analytic_gap = analytic.as_ref().map(|a| output.sub(a).expect("same shape").l2_norm());

    Ok(ZeroProbeRecord {
        t_start,
        label,
        dist_to_zero: output.l2_norm(),
        dist_to_nearest_train,
        nearest_train_index,
        analytic_prediction: analytic.map(|a| a.data().to_vec()),
        analytic_gap,
        output: output.data().to_vec(),
    })
}

/// Result of injecting localized noise into `x_t` and denoising one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaProbeRecord {
    pub t: usize,
    pub label: usize,
    pub region_fraction: f64,
    pub delta_magnitude: f64,
    /// Injected energy within the region.
    pub delta_sq: f64,
    /// Energy of the prediction change within the region.
    pub region_residual: f64,
    /// `region_residual / delta_sq`; `None` for a zero-magnitude probe.
    pub ratio: Option<f64>,
    /// Analytic `k^2` at this step from the supplied world model.
    pub analytic_k_sq: Option<f64>,
}

/// Builds `x_t = sqrt(abar) anchor + sqrt(1-abar) eps + delta` with `delta`
/// confined to a top-left square region covering `region_fraction` of the
/// pixels, denoises one step with and without the injection (same `eps`),
/// and reports the induced region energy relative to the injected energy.
#[allow(clippy::too_many_arguments)]
pub fn delta_injection_probe(
    den: &Denoiser,
    anchor: &NumArray,
    t: usize,
    label: usize,
    region_fraction: f64,
    delta_magnitude: f64,
    raster_side: usize,
    probe_seed: u64,
    world: Option<&GaussianWorldModel>,
) -> Result<DeltaProbeRecord> {
    if !(region_fraction > 0.0 && region_fraction <= 1.0) {
        return Err(Error::Contract(format!("region fraction must be in (0, 1], got {region_fraction}")));
    }
    if t == 0 {
        return Err(Error::Contract("delta injection needs t >= 1".into()));
    }
    if raster_side * raster_side != anchor.len() {
        return Err(Error::Contract(format!(
            "anchor length {} is not a {raster_side}x{raster_side} raster",
            anchor.len()
        )));
    }

    let region_side = ((raster_side as f64) * region_fraction.sqrt()).round().max(1.0) as usize;
    let region_side = region_side.min(raster_side);
    let in_region = |i: usize| -> bool {
        let r = i / raster_side;
        let c = i % raster_side;
        r < region_side && c < region_side
    };

    let mut rng = seeded_rng(derive_seed(probe_seed, &[STREAM_METRIC, 0xDE17A, t as u64]));
    let eps = standard_normal(anchor.rows(), 1, &mut rng);
    let noise_pattern = standard_normal(anchor.rows(), 1, &mut rng);
    let mut delta = NumArray::zeros(anchor.rows(), 1);
    for i in 0..delta.len() {
        if in_region(i) {
            delta.data_mut()[i] = delta_magnitude * noise_pattern.data()[i];
        }
    }

    let x_base = forward_diffuse(anchor, t, &eps, den.sched)?;
    let x_injected = x_base.add(&delta)?;
    let x0_base = predict_x0(den, &x_base, t, label)?;
    let x0_injected = predict_x0(den, &x_injected, t, label)?;

    let diff = x0_injected.sub(&x0_base)?;
    let region_residual: f64 = diff
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| in_region(*i))
        .map(|(_, v)| v * v)
        .sum();
    let delta_sq = delta.sq_sum();
    let ratio = if delta_sq > 0.0 { Some(region_residual / delta_sq) } else { None };
    let analytic_k_sq = world.map(|wm| {
        let k = amplification_at(wm.sigma1, den.sched.alpha_bar(t));
        k * k
    });

    Ok(DeltaProbeRecord {
        t,
        label,
        region_fraction,
        delta_magnitude,
        delta_sq,
        region_residual,
        ratio,
        analytic_k_sq,
    })
}

/// One entry of the scaled-anchor input sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleProbeRecord {
    pub k: f64,
    pub t: usize,
    pub label: usize,
    /// Cosine between the one-step prediction and the anchor.
    pub cosine_to_anchor: f64,
    /// Analytic scaling factor `1 + amp * (k - sqrt(abar))`, if a world
    /// model is supplied.
    pub analytic_scale: Option<f64>,
    pub output: Vec<f64>,
}

/// Denoises `x_t = k * anchor` one step for each `k`.
pub fn scale_probe(
    den: &Denoiser,
    anchor: &NumArray,
    t: usize,
    label: usize,
    ks: &[f64],
    world: Option<&GaussianWorldModel>,
) -> Result<Vec<ScaleProbeRecord>> {
    let mut records = Vec::with_capacity(ks.len());
    for &k in ks {
        let x_t = anchor.scale(k);
        let output = predict_x0(den, &x_t, t, label)?;
        let cos = {
            let na = output.l2_norm();
            let nb = anchor.l2_norm();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                output.dot(anchor)? / (na * nb)
            }
        };
        let analytic_scale = match world {
            Some(wm) => {
                let abar = den.sched.alpha_bar(t);
                Some(1.0 + amplification_at(wm.sigma1, abar) * (k - abar.sqrt()))
            }
            None => None,
        };
        records.push(ScaleProbeRecord {
            k,
            t,
            label,
            cosine_to_anchor: cos,
            analytic_scale,
            output: output.data().to_vec(),
        });
    }
    Ok(records)
}
