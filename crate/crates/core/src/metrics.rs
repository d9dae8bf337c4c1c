//! Desk-scale metric analogs and the corruption-curve detector.
//!
//! Fidelity is a seeded random-projection cosine to the nearest training
//! sample (stand-in for embedding similarity), diversity the mean pairwise
//! distance among generated samples, and quality one minus a normalized
//! high-frequency residual score computed with a Laplacian stencil (only
//! meaningful for raster data; point data reports 1.0).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, standard_normal, STREAM_METRIC};
use crate::tensor::NumArray;

/// Projection width used by the fidelity metric.
pub const FIDELITY_PROJECTION_DIM: usize = 32;

/// Default dip threshold for corruption detection.
pub const DEFAULT_DIP_THRESHOLD: f64 = 0.05;

/// Per-checkpoint metrics row; the CSV schema of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Projected max-cosine to the training set, in [-1, 1].
    pub fidelity: f64,
    /// Mean pairwise L2 distance among generated samples, >= 0.
    pub diversity: f64,
    /// High-frequency energy ratio, in [0, 1].
    pub quality: f64,
    /// Median world-model confidence estimate (may be +inf early on).
    pub sigma1: f64,
    /// Diffusion loss on the training set.
    pub l_dm: f64,
    /// KL regularizer summed over wrapped layers (0 without BNNs).
    pub l_r: f64,
}

/// Fixed per-experiment state for metric evaluation.
#[derive(Debug, Clone)]
pub struct MetricsContext {
    projection: NumArray,
    raster_side: Option<usize>,
}

impl MetricsContext {
    /// The projection map depends only on `(metric_seed, dim)`, so curves
    /// from different checkpoints of one experiment are comparable.
    pub fn new(metric_seed: u64, dim: usize, raster_side: Option<usize>) -> Self {
        let mut rng = seeded_rng(derive_seed(metric_seed, &[STREAM_METRIC, 0xF1DE]));
        let projection = standard_normal(FIDELITY_PROJECTION_DIM, dim, &mut rng)
            .scale(1.0 / (dim as f64).sqrt());
        MetricsContext { projection, raster_side }
    }

    pub fn raster_side(&self) -> Option<usize> {
        self.raster_side
    }

    fn project(&self, x: &NumArray) -> Result<NumArray> {
        Ok(self.projection.matmul(x)?)
    }
}

fn cosine(a: &NumArray, b: &NumArray) -> f64 {
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b).expect("same shape") / (na * nb)
}

/// Mean over generated samples of the max cosine similarity to any training
/// sample, in the fixed projected space.
pub fn fidelity(ctx: &MetricsContext, generated: &[NumArray], training: &[NumArray]) -> Result<f64> {
    if generated.is_empty() || training.is_empty() {
        return Err(Error::Contract("fidelity needs non-empty generated and training sets".into()));
    }
    let train_proj: Vec<NumArray> = training.iter().map(|x| ctx.project(x)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for g in generated {
        let gp = ctx.project(g)?;
        let best = train_proj
            .iter()
            .map(|tp| cosine(&gp, tp))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total / generated.len() as f64)
}

/// Mean pairwise L2 distance.
pub fn diversity(generated: &[NumArray]) -> Result<f64> {
    if generated.len() < 2 {
        return Err(Error::Contract("diversity needs at least two samples".into()));
    }
    let n = generated.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += generated[i].sub(&generated[j])?.l2_norm();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean squared Laplacian response over interior pixels.
fn high_frequency_energy(x: &NumArray, side: usize) -> f64 {
    debug_assert_eq!(x.len(), side * side);
    let at = |r: usize, c: usize| x.data()[r * side + c];
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 1..side - 1 {
        for c in 1..side - 1 {
            let v = 4.0 * at(r, c) - at(r - 1, c) - at(r + 1, c) - at(r, c - 1) - at(r, c + 1);
            total += v * v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// High-frequency energy ratio `clamp(train / generated, 0, 1)`: excess
/// high-frequency content in the generated set lowers the score. Point data
/// (no raster side) scores 1.0 by definition.
pub fn quality(ctx: &MetricsContext, generated: &[NumArray], training: &[NumArray]) -> Result<f64> {
    let Some(side) = ctx.raster_side else {
        return Ok(1.0);
    };
    if generated.is_empty() || training.is_empty() {
        return Err(Error::Contract("quality needs non-empty generated and training sets".into()));
    }
    let mean_energy = |set: &[NumArray]| -> f64 {
        set.iter().map(|x| high_frequency_energy(x, side)).sum::<f64>() / set.len() as f64
    };
    let train_energy = mean_energy(training);
    let gen_energy = mean_energy(generated);
    if gen_energy == 0.0 {
        return Ok(1.0);
    }
    Ok((train_energy / gen_energy).clamp(0.0, 1.0))
}

/// Detected rise-dip-rise structure in a fidelity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub detected: bool,
    pub peak_iteration: Option<usize>,
    pub trough_iteration: Option<usize>,
    pub recovery_iteration: Option<usize>,
    /// Smoothed peak fidelity minus smoothed trough fidelity (0 when not detected).
    pub dip_depth: f64,
}

impl CorruptionReport {
    fn none() -> Self {
        CorruptionReport {
            detected: false,
            peak_iteration: None,
            trough_iteration: None,
            recovery_iteration: None,
            dip_depth: 0.0,
        }
    }
}

/// Centered 3-point moving average with truncated windows at the edges.
pub fn smooth_fidelity(rows: &[MetricsRow]) -> Vec<f64> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let window = &rows[lo..=hi];
            window.iter().map(|r| r.fidelity).sum::<f64>() / window.len() as f64
        })
        .collect()
}

/// Scans the smoothed fidelity curve for a peak-trough-recovery triple:
/// detected iff some `p < q < r` has `f(p) - f(q) >= dip_threshold` and
/// `f(r) - f(q) >= dip_threshold / 2`. Reports the triple maximizing the dip
/// depth (earliest on ties).
pub fn detect_corruption(rows: &[MetricsRow], dip_threshold: f64) -> Result<CorruptionReport> {
    if rows.len() < 5 {
        return Err(Error::Contract(format!("corruption detection needs >= 5 rows, got {}", rows.len())));
    }
    let f = smooth_fidelity(rows);
    let n = f.len();

    // Prefix maxima (first index achieving the max before q) and suffix
    // maxima (first index achieving the max after q).
    let mut best = CorruptionReport::none();
    for q in 1..n - 1 {
        let (p_idx, p_val) = f[..q]
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let (r_off, r_val) = f[q + 1..]
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        let depth = p_val - f[q];
        let recovery = r_val - f[q];
        if depth >= dip_threshold && recovery >= 0.5 * dip_threshold && depth > best.dip_depth {
            best = CorruptionReport {
                detected: true,
                peak_iteration: Some(rows[p_idx].iteration),
                trough_iteration: Some(rows[q].iteration),
                recovery_iteration: Some(rows[q + 1 + r_off].iteration),
                dip_depth: depth,
            };
        }
    }
    Ok(best)
}
