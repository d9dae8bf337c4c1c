//! Finite-difference verification of tape gradients.
//!
//! The check rebuilds the graph from scratch for every probe, so it exercises
//! only forward evaluations and stays independent of the backward pass it
//! verifies. Central differences with step `h` approximate the directional
//! derivative along random unit directions.

use rand_chacha::ChaCha8Rng;

use crate::rng::standard_normal;
use crate::tape::{NodeId, Tape};
use crate::tensor::NumArray;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of a single directional probe.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.relative_error <= tolerance
    }
}

/// Relative gap between an analytic and a numeric directional derivative,
/// guarded for near-zero magnitudes.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Checks `d loss / d inputs` along one direction.
///
/// `build` must construct the graph from the given leaf values and return
/// (tape, leaf ids, loss id). The analytic directional derivative is the sum
/// of `grad . direction` over all leaves; the numeric one is the central
/// difference of the rebuilt loss at `inputs +- h * direction`.
pub fn check_directional(
    inputs: &[NumArray],
    directions: &[NumArray],
    step: f64,
    build: &dyn Fn(&[NumArray]) -> (Tape, Vec<NodeId>, NodeId),
) -> GradCheckReport {
    let (tape, leaves, loss) = build(inputs);
    let grads = tape.backward(loss).expect("scalar loss expected in gradcheck");
    let mut analytic = 0.0;
    for (leaf, dir) in leaves.iter().zip(directions) {
        analytic += grads.of(&tape, *leaf).dot(dir).expect("direction shape");
    }

    let shifted = |sign: f64| -> f64 {
        let moved: Vec<NumArray> = inputs
            .iter()
            .zip(directions)
            .map(|(x, d)| {
                let mut m = x.clone();
                m.axpy(sign * step, d);
                m
            })
            .collect();
        let (t, _, l) = build(&moved);
        t.scalar(l)
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);

    GradCheckReport {
        analytic,
        numeric,
        relative_error: relative_error(analytic, numeric),
    }
}

/// Runs `n_probes` random-direction checks and returns the worst report.
pub fn check_random_directions(
    inputs: &[NumArray],
    n_probes: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
    build: &dyn Fn(&[NumArray]) -> (Tape, Vec<NodeId>, NodeId),
) -> GradCheckReport {
    let mut worst = GradCheckReport { analytic: 0.0, numeric: 0.0, relative_error: 0.0 };
    for _ in 0..n_probes {
        let directions: Vec<NumArray> = inputs
            .iter()
            .map(|x| {
                let (r, c) = x.shape();
                let d = standard_normal(r, c, rng);
                let n = d.l2_norm();
                if n > 0.0 {
                    d.scale(1.0 / n)
                } else {
                    d
                }
            })
            .collect();
        let report = check_directional(inputs, &directions, step, build);
        if report.relative_error > worst.relative_error {
            worst = report;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn quadratic_passes() {
        let build = |xs: &[NumArray]| {
            let mut tape = Tape::new();
            let x = tape.leaf(xs[0].clone());
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq);
            (tape, vec![x], loss)
        };
        let mut rng = seeded_rng(3);
        let inputs = vec![standard_normal(3, 1, &mut rng)];
        let report = check_random_directions(&inputs, 8, DEFAULT_STEP, &mut rng, &build);
        assert!(report.within(DEFAULT_TOLERANCE), "{report:?}");
    }

    #[test]
    fn deliberately_wrong_gradient_fails() {
        // loss pretends to be sum(2x) in backward terms by scaling after the
        // leaf is read; numeric path sees sum(x^3) instead.
        let build_bad = |xs: &[NumArray]| {
            let mut tape = Tape::new();
            let x = tape.leaf(xs[0].clone());
            let cube = {
                let sq = tape.mul(x, x).unwrap();
                tape.mul(sq, x).unwrap()
            };
            let loss = tape.sum(cube);
            // Report the wrong leaf set: pretend loss depends on a fresh leaf.
            let decoy = tape.leaf(xs[0].clone());
            (tape, vec![decoy], loss)
        };
        let mut rng = seeded_rng(4);
        let inputs = vec![NumArray::col(vec![0.9, -1.4])];
        let report = check_random_directions(&inputs, 4, DEFAULT_STEP, &mut rng, &build_bad);
        assert!(!report.within(DEFAULT_TOLERANCE));
    }
}
