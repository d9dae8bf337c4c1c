//! Fine-tuning algebras and where they attach.
//!
//! Three variants: full fine-tuning, additive low-rank updates
//! (`W = W0 + B A`), and multiplicative orthogonal updates (`W = R W0` with
//! `R` from the Cayley transform of a skew-symmetrized trainable `Q`). Each
//! has a Bayesian form in which exactly one matrix becomes a variational
//! parameter: the full weight itself, the up matrix `A`, or `Q` — keeping the
//! induced weight distribution Gaussian (LoRA) or every sampled `R` exactly
//! orthogonal (OFT).
//!
//! Placement patterns select the layers that get the treatment. For the full
//! variant every layer stays trainable and placement chooses the Bayesian
//! subset; for LoRA/OFT placement chooses where adapters attach and the rest
//! of the network freezes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::lu_inverse;
use crate::model::{DenoiserModel, Layer, LayerKind, LayerWeights, ModelHalf, ParamTensor};
use crate::rng::{derive_seed, seeded_rng, standard_normal, STREAM_INIT};
use crate::tape::{NodeId, Tape};
use crate::tensor::NumArray;
use crate::vb::{init_variational, mean_mode, sample_param};

/// Which layers a fine-tuning treatment applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Every linear layer, conditioning projection included; embeddings untouched.
    AllLinear,
    /// Backbone linear layers only.
    LinearNoConditioning,
    /// Backbone linear layers in the second (up) half.
    UpBlockOnly,
    /// Conditioning projection and the label embedding table.
    ConditioningOnly,
    /// Normalization layers only.
    NormOnly,
}

/// Tuning algebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AdapterVariant {
    Full,
    Lora {
        rank: usize,
    },
    /// `block_size: None` means one block spanning the full layer width.
    Oft {
        block_size: Option<usize>,
    },
}

/// Complete adapter request: algebra, Bayesian flag, placement, scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub variant: AdapterVariant,
    pub bayesian: bool,
    pub placement: Placement,
    /// Initial posterior standard deviation for wrapped weights.
    #[serde(default = "default_sigma")]
    pub sigma_init: f64,
    /// Prior standard deviation around the pretrained snapshot.
    #[serde(default = "default_sigma")]
    pub prior_sigma: f64,
}

fn default_sigma() -> f64 {
    0.01
}

impl AdapterSpec {
    pub fn plain_full() -> AdapterSpec {
        AdapterSpec {
            variant: AdapterVariant::Full,
            bayesian: false,
            placement: Placement::AllLinear,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_init <= 0.0 || self.prior_sigma <= 0.0 {
            return Err(Error::Config(format!(
                "sigma_init and prior_sigma must be positive, got {} / {}",
                self.sigma_init, self.prior_sigma
            )));
        }
        if let AdapterVariant::Lora { rank } = self.variant {
            if rank == 0 {
                return Err(Error::Config("LoRA rank must be >= 1".into()));
            }
        }
        if let AdapterVariant::Oft { block_size: Some(0) } = self.variant {
            return Err(Error::Config("OFT block size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Effects of [`apply_placement`], for manifests and reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub matched_layers: usize,
    pub trainable_params: usize,
    pub stochastic_params: usize,
    pub stochastic_fraction: f64,
}

fn matches_placement(placement: Placement, layer: &Layer) -> bool {
    match placement {
        Placement::AllLinear => matches!(layer.kind, LayerKind::Linear | LayerKind::CondProj),
        Placement::LinearNoConditioning => layer.kind == LayerKind::Linear,
        Placement::UpBlockOnly => layer.kind == LayerKind::Linear && layer.half == ModelHalf::Second,
        Placement::ConditioningOnly => layer.kind == LayerKind::CondProj,
        Placement::NormOnly => layer.kind == LayerKind::Norm,
    }
}

fn placement_covers_labels(placement: Placement) -> bool {
    placement == Placement::ConditioningOnly
}

/// Orthogonal matrix from an unconstrained square `Q`:
/// `R = (I + S)(I - S)^-1` with `S = (Q - Q^T)/2`.
pub fn cayley(q: &NumArray) -> Result<NumArray> {
    let (rows, cols) = q.shape();
    if rows != cols {
        return Err(Error::Tensor(crate::tensor::TensorError::NotSquare { rows, cols }));
    }
    let s = q.sub(&q.transpose())?.scale(0.5);
    let i = NumArray::identity(rows);
    let plus = i.add(&s)?;
    let minus = i.sub(&s)?;
    Ok(plus.matmul(&lu_inverse(&minus)?)?)
}

/// [`cayley`] recorded on a tape so gradients flow into `Q`.
pub fn cayley_on_tape(tape: &mut Tape, q: NodeId) -> Result<NodeId> {
    let n = tape.value(q).rows();
    let qt = tape.transpose(q);
    let diff = tape.sub(q, qt)?;
    let s = tape.scale(diff, 0.5);
    let i = tape.constant(NumArray::identity(n));
    let plus = tape.add(i, s)?;
    let minus = tape.sub(i, s)?;
    let inv = tape.mat_inverse(minus)?;
    Ok(tape.matmul(plus, inv)?)
}

/// Materializes one tensor: plain/frozen values pass through, variational
/// tensors sample with the given rng or take the mean when `rng` is `None`.
fn resolve(pt: &ParamTensor, rng: &mut Option<&mut ChaCha8Rng>) -> NumArray {
    match pt {
        ParamTensor::Plain(v) | ParamTensor::Frozen(v) => v.clone(),
        ParamTensor::Variational(vp) => match rng {
            Some(r) => sample_param(vp, r).theta,
            None => mean_mode(vp),
        },
    }
}

/// Effective LoRA weight `W0 + down * up`; `rng` draws the Bayesian up
/// matrix, `None` uses its mean.
pub fn lora_effective_weight(
    w0: &NumArray,
    down: &ParamTensor,
    up: &ParamTensor,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NumArray> {
    let delta = resolve(down, &mut rng).matmul(&resolve(up, &mut rng))?;
    Ok(w0.add(&delta)?)
}

/// Effective OFT weight `blockdiag(cayley(Q_i)) W0`; orthogonality holds for
/// every posterior draw, not just the mean.
pub fn oft_effective_weight(
    w0: &NumArray,
    blocks: &[ParamTensor],
    block_size: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NumArray> {
    let mut parts = Vec::with_capacity(blocks.len());
    for (i, q) in blocks.iter().enumerate() {
        let r = cayley(&resolve(q, &mut rng))?;
        parts.push(r.matmul(&w0.slice_rows(i * block_size, (i + 1) * block_size))?);
    }
    Ok(NumArray::stack_rows(&parts)?)
}

/// Rewrites the model's layers according to the adapter spec.
///
/// Full: every layer stays trainable; when `bayesian`, the weights of
/// matching layers (and the label table under the conditioning placement)
/// become variational. LoRA/OFT: matching layers must be affine and get the
/// adapter (with the designated matrix variational when `bayesian`);
/// everything else freezes at its pretrained value.
pub fn apply_placement(model: DenoiserModel, spec: &AdapterSpec, seed: u64) -> Result<(DenoiserModel, PlacementReport)> {
    spec.validate()?;
    let mut model = model;

    let already_wrapped = model.layers.iter().any(|l| {
        matches!(l.weights, LayerWeights::Lora { .. } | LayerWeights::Oft { .. })
    }) || {
        let mut any = false;
        model.visit_params(|_, pt| any |= pt.is_variational());
        any
    };
    if already_wrapped {
        return Err(Error::Config("adapters are already applied to this model; composing adapters is not supported".into()));
    }

    let matched: Vec<bool> = model.layers.iter().map(|l| matches_placement(spec.placement, l)).collect();
    let matched_layers = matched.iter().filter(|&&m| m).count();
    if matched_layers == 0 {
        return Err(Error::Config(format!("placement {:?} matches no layer", spec.placement)));
    }

    let mut init_rng = seeded_rng(derive_seed(seed, &[STREAM_INIT, 0xADA9]));
    let wrap = |pt: &mut ParamTensor, sigma_init: f64, prior_sigma: f64| -> Result<()> {
        let value = match pt {
            ParamTensor::Plain(v) | ParamTensor::Frozen(v) => v.clone(),
            ParamTensor::Variational(_) => unreachable!("checked above"),
        };
        *pt = ParamTensor::Variational(init_variational(&value, sigma_init, prior_sigma)?);
        Ok(())
    };
    let freeze = |pt: &mut ParamTensor| {
        if let ParamTensor::Plain(v) = pt {
            *pt = ParamTensor::Frozen(v.clone());
        }
    };

    match spec.variant {
        AdapterVariant::Full => {
            if spec.bayesian {
                for (layer, &is_match) in model.layers.iter_mut().zip(&matched) {
                    if !is_match {
                        continue;
                    }
                    match &mut layer.weights {
                        LayerWeights::Dense { w, b } => {
                            wrap(w, spec.sigma_init, spec.prior_sigma)?;
                            wrap(b, spec.sigma_init, spec.prior_sigma)?;
                        }
                        LayerWeights::Norm { gain, bias } => {
                            wrap(gain, spec.sigma_init, spec.prior_sigma)?;
                            wrap(bias, spec.sigma_init, spec.prior_sigma)?;
                        }
                        _ => unreachable!("unwrapped model has only dense and norm layers"),
                    }
                }
                if placement_covers_labels(spec.placement) {
                    for v in &mut model.label_embed {
                        wrap(v, spec.sigma_init, spec.prior_sigma)?;
                    }
                }
            }
        }
        AdapterVariant::Lora { rank } => {
            let affine_matches = model
                .layers
                .iter()
                .zip(&matched)
                .filter(|(l, &m)| m && matches!(l.kind, LayerKind::Linear | LayerKind::CondProj))
                .count();
            if affine_matches == 0 {
                return Err(Error::Config(format!(
                    "placement {:?} matches no affine layer for LoRA",
                    spec.placement
                )));
            }
            for (layer, &is_match) in model.layers.iter_mut().zip(&matched) {
                if is_match {
                    let LayerWeights::Dense { w, b } = &layer.weights else {
                        unreachable!("matched affine layer is dense in an unwrapped model");
                    };
                    let (w0, b0) = match (w, b) {
                        (ParamTensor::Plain(wv), ParamTensor::Plain(bv)) => (wv.clone(), bv.clone()),
                        _ => unreachable!("unwrapped model has plain weights"),
                    };
                    let (d, k) = w0.shape();
                    if rank > d.min(k) {
                        return Err(Error::Config(format!(
                            "LoRA rank {rank} exceeds min dimension of layer {} ({d}x{k})",
                            layer.name
                        )));
                    }
                    // Standard start: zero down matrix, small Gaussian up matrix.
                    let up_init = standard_normal(rank, k, &mut init_rng).scale(0.01);
                    let up = if spec.bayesian {
                        ParamTensor::Variational(init_variational(&up_init, spec.sigma_init, spec.prior_sigma)?)
                    } else {
                        ParamTensor::Plain(up_init)
                    };
                    layer.weights = LayerWeights::Lora {
                        w0,
                        b0,
                        down: ParamTensor::Plain(NumArray::zeros(d, rank)),
                        up,
                        rank,
                    };
                } else {
                    freeze_layer(layer, &freeze);
                }
            }
            for v in &mut model.label_embed {
                freeze(v);
            }
        }
        AdapterVariant::Oft { block_size } => {
            let affine_matches = model
                .layers
                .iter()
                .zip(&matched)
                .filter(|(l, &m)| m && matches!(l.kind, LayerKind::Linear | LayerKind::CondProj))
                .count();
            if affine_matches == 0 {
                return Err(Error::Config(format!(
                    "placement {:?} matches no affine layer for OFT",
                    spec.placement
                )));
            }
            for (layer, &is_match) in model.layers.iter_mut().zip(&matched) {
                if is_match {
                    let LayerWeights::Dense { w, b } = &layer.weights else {
                        unreachable!("matched affine layer is dense in an unwrapped model");
                    };
                    let (w0, b0) = match (w, b) {
                        (ParamTensor::Plain(wv), ParamTensor::Plain(bv)) => (wv.clone(), bv.clone()),
                        _ => unreachable!("unwrapped model has plain weights"),
                    };
                    let d = w0.rows();
                    let bs = block_size.unwrap_or(d);
                    if bs == 0 || d % bs != 0 {
                        return Err(Error::Config(format!(
                            "OFT block size {bs} does not divide layer width {d} ({})",
                            layer.name
                        )));
                    }
                    let blocks = (0..d / bs)
                        .map(|_| {
                            let q0 = NumArray::zeros(bs, bs);
                            Ok(if spec.bayesian {
                                ParamTensor::Variational(init_variational(&q0, spec.sigma_init, spec.prior_sigma)?)
                            } else {
                                ParamTensor::Plain(q0)
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layer.weights = LayerWeights::Oft { w0, b0, blocks, block_size: bs };
                } else {
                    freeze_layer(layer, &freeze);
                }
            }
            for v in &mut model.label_embed {
                freeze(v);
            }
        }
    }

    let counts = model.param_counts();
    let report = PlacementReport {
        matched_layers,
        trainable_params: counts.trainable,
        stochastic_params: counts.stochastic,
        stochastic_fraction: counts.stochastic_fraction(),
    };
    Ok((model, report))
}

fn freeze_layer(layer: &mut Layer, freeze: &impl Fn(&mut ParamTensor)) {
    match &mut layer.weights {
        LayerWeights::Dense { w, b } => {
            freeze(w);
            freeze(b);
        }
        LayerWeights::Norm { gain, bias } => {
            freeze(gain);
            freeze(bias);
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, WeightMode};
    use crate::rng::seeded_rng;

    #[test]
    fn cayley_of_zero_is_identity() {
        let r = cayley(&NumArray::zeros(3, 3)).unwrap();
        assert_eq!(r, NumArray::identity(3));
    }

    #[test]
    fn cayley_rotation_hand_value() {
        let q = NumArray::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        let r = cayley(&q).unwrap();
        let expect = NumArray::new(2, 2, vec![0.0, 1.0, -1.0, 0.0]).unwrap();
        assert!(r.max_abs_diff(&expect) < 1e-15, "{r:?}");
        let gram = r.transpose().matmul(&r).unwrap();
        assert!(gram.max_abs_diff(&NumArray::identity(2)) < 1e-15);
    }

    #[test]
    fn cayley_random_orthogonality() {
        let mut rng = seeded_rng(21);
        for &n in &[2usize, 5, 16] {
            let q = standard_normal(n, n, &mut rng);
            let r = cayley(&q).unwrap();
            let residual = r.transpose().matmul(&r).unwrap().sub(&NumArray::identity(n)).unwrap();
            assert!(residual.frobenius_norm() < 1e-9, "n={n}: {}", residual.frobenius_norm());
        }
    }

    #[test]
    fn cayley_tape_matches_plain_and_has_gradients() {
        use crate::gradcheck::{check_random_directions, DEFAULT_STEP, DEFAULT_TOLERANCE};
        let mut rng = seeded_rng(22);
        let q = standard_normal(4, 4, &mut rng);
        let mut tape = Tape::new();
        let q_node = tape.leaf(q.clone());
        let r_node = cayley_on_tape(&mut tape, q_node).unwrap();
        assert!(tape.value(r_node).max_abs_diff(&cayley(&q).unwrap()) < 1e-12);

        // The Frobenius norm of R is constant over the orthogonal manifold,
        // so weight entries asymmetrically to get a non-degenerate loss.
        let weights = standard_normal(4, 4, &mut rng);
        let build = |inputs: &[NumArray]| {
            let mut tape = Tape::new();
            let qn = tape.leaf(inputs[0].clone());
            let rn = cayley_on_tape(&mut tape, qn).unwrap();
            let wn = tape.constant(weights.clone());
            let weighted = tape.mul(rn, wn).unwrap();
            let loss = tape.sum(weighted);
            (tape, vec![qn], loss)
        };
        let report = check_random_directions(&[q], 8, DEFAULT_STEP, &mut rng, &build);
        assert!(report.within(DEFAULT_TOLERANCE), "{report:?}");
    }

    #[test]
    fn lora_trivial_cases() {
        let mut rng = seeded_rng(23);
        let w0 = standard_normal(4, 3, &mut rng);
        // up = 0 -> W0 regardless of down
        let down = ParamTensor::Plain(standard_normal(4, 2, &mut rng));
        let up = ParamTensor::Plain(NumArray::zeros(2, 3));
        assert_eq!(lora_effective_weight(&w0, &down, &up, None).unwrap(), w0);
        // down = 0 -> W0 regardless of up randomness
        let down0 = ParamTensor::Plain(NumArray::zeros(4, 2));
        let up_v = ParamTensor::Variational(init_variational(&standard_normal(2, 3, &mut rng), 0.5, 0.5).unwrap());
        let mut r = seeded_rng(1);
        assert_eq!(lora_effective_weight(&w0, &down0, &up_v, Some(&mut r)).unwrap(), w0);
    }

    #[test]
    fn lora_plain_matches_dense_reference() {
        let mut rng = seeded_rng(24);
        let w0 = standard_normal(5, 4, &mut rng);
        let b = standard_normal(5, 2, &mut rng);
        let a = standard_normal(2, 4, &mut rng);
        let eff = lora_effective_weight(&w0, &ParamTensor::Plain(b.clone()), &ParamTensor::Plain(a.clone()), None).unwrap();
        let reference = w0.add(&b.matmul(&a).unwrap()).unwrap();
        assert_eq!(eff, reference);
    }

    #[test]
    fn lora_bayesian_covariance_propagates() {
        // Var(W_ij) = sigma^2 * sum_r down_ir^2 for iid up entries.
        let mut rng = seeded_rng(25);
        let w0 = NumArray::zeros(3, 2);
        let down_v = standard_normal(3, 2, &mut rng);
        let sigma = 0.05;
        let up0 = standard_normal(2, 2, &mut rng).scale(0.01);
        let up = ParamTensor::Variational(init_variational(&up0, sigma, sigma).unwrap());
        let down = ParamTensor::Plain(down_v.clone());
        let n = 10_000;
        let mut sum = NumArray::zeros(3, 2);
        let mut sum_sq = NumArray::zeros(3, 2);
        for _ in 0..n {
            let w = lora_effective_weight(&w0, &down, &up, Some(&mut rng)).unwrap();
            sum.axpy(1.0, &w);
            for (acc, v) in sum_sq.data_mut().iter_mut().zip(w.data()) {
                *acc += v * v;
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                let mean = sum.get(i, j) / n as f64;
                let var = sum_sq.get(i, j) / n as f64 - mean * mean;
                let expect: f64 = (0..2).map(|r| down_v.get(i, r).powi(2) * sigma * sigma).sum();
                assert!(
                    (var - expect).abs() / expect < 0.05,
                    "entry ({i},{j}): empirical {var} vs closed-form {expect}"
                );
            }
        }
    }

    #[test]
    fn oft_trivial_and_spectral_cases() {
        let mut rng = seeded_rng(26);
        let w0 = standard_normal(4, 3, &mut rng);
        // Q at init (zero) -> W0 exactly
        let blocks = vec![ParamTensor::Plain(NumArray::zeros(4, 4))];
        assert_eq!(oft_effective_weight(&w0, &blocks, 4, None).unwrap(), w0);

        // Bayesian draw keeps the Gram matrix and spectral norm of W0.
        let q0 = NumArray::zeros(4, 4);
        let blocks_v = vec![ParamTensor::Variational(init_variational(&q0, 0.3, 0.3).unwrap())];
        let mut r = seeded_rng(2);
        let w = oft_effective_weight(&w0, &blocks_v, 4, Some(&mut r)).unwrap();
        let gram_w = w.transpose().matmul(&w).unwrap();
        let gram_w0 = w0.transpose().matmul(&w0).unwrap();
        assert!(gram_w.max_abs_diff(&gram_w0) < 1e-9);
        let s_w = crate::linalg::spectral_norm(&w, 300);
        let s_w0 = crate::linalg::spectral_norm(&w0, 300);
        assert!((s_w - s_w0).abs() < 1e-6, "{s_w} vs {s_w0}");
    }

    #[test]
    fn oft_block_diagonal_blocks_are_orthogonal() {
        let mut rng = seeded_rng(27);
        let w0 = standard_normal(6, 4, &mut rng);
        let blocks = vec![
            ParamTensor::Plain(standard_normal(3, 3, &mut rng)),
            ParamTensor::Plain(standard_normal(3, 3, &mut rng)),
        ];
        let w = oft_effective_weight(&w0, &blocks, 3, None).unwrap();
        let gram_w = w.transpose().matmul(&w).unwrap();
        let gram_w0 = w0.transpose().matmul(&w0).unwrap();
        assert!(gram_w.max_abs_diff(&gram_w0) < 1e-9);
    }

    fn probe_cfg() -> ModelConfig {
        ModelConfig { data_dim: 2, hidden_dim: 8, embed_dim: 4, n_labels: 2 }
    }

    #[test]
    fn full_bayesian_norm_only_fraction_is_small() {
        let cfg = ModelConfig { data_dim: 64, hidden_dim: 256, embed_dim: 16, n_labels: 8 };
        let model = DenoiserModel::new_plain(cfg, 3).unwrap();
        let spec = AdapterSpec {
            variant: AdapterVariant::Full,
            bayesian: true,
            placement: Placement::NormOnly,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        let (wrapped, report) = apply_placement(model, &spec, 3).unwrap();
        assert!(report.stochastic_fraction < 0.01, "fraction {}", report.stochastic_fraction);
        assert_eq!(report.matched_layers, 2);
        // All layers remain trainable under the full variant.
        assert_eq!(wrapped.param_counts().frozen, 0);
    }

    #[test]
    fn all_linear_wraps_linears_but_not_embeddings() {
        let model = DenoiserModel::new_plain(probe_cfg(), 4).unwrap();
        let spec = AdapterSpec {
            variant: AdapterVariant::Full,
            bayesian: true,
            placement: Placement::AllLinear,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        let (wrapped, _) = apply_placement(model, &spec, 4).unwrap();
        for layer in &wrapped.layers {
            let expect_wrapped = matches!(layer.kind, LayerKind::Linear | LayerKind::CondProj);
            match &layer.weights {
                LayerWeights::Dense { w, .. } => assert_eq!(w.is_variational(), expect_wrapped, "{}", layer.name),
                LayerWeights::Norm { gain, .. } => assert!(!gain.is_variational(), "{}", layer.name),
                _ => panic!("full variant must not introduce adapter layers"),
            }
        }
        for v in &wrapped.label_embed {
            assert!(!v.is_variational());
        }
    }

    #[test]
    fn up_block_only_wraps_second_half_linears() {
        let model = DenoiserModel::new_plain(probe_cfg(), 5).unwrap();
        let spec = AdapterSpec {
            variant: AdapterVariant::Lora { rank: 2 },
            bayesian: true,
            placement: Placement::UpBlockOnly,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        let (wrapped, report) = apply_placement(model, &spec, 5).unwrap();
        for layer in &wrapped.layers {
            let should_adapt = layer.kind == LayerKind::Linear && layer.half == ModelHalf::Second;
            match &layer.weights {
                LayerWeights::Lora { up, .. } => {
                    assert!(should_adapt, "{}", layer.name);
                    assert!(up.is_variational());
                }
                LayerWeights::Dense { w, b } => {
                    assert!(!should_adapt, "{}", layer.name);
                    assert!(!w.is_trainable() && !b.is_trainable());
                }
                LayerWeights::Norm { gain, bias } => {
                    assert!(!gain.is_trainable() && !bias.is_trainable());
                }
                LayerWeights::Oft { .. } => panic!("no OFT requested"),
            }
        }
        assert_eq!(report.matched_layers, 2);
    }

    #[test]
    fn adapted_model_at_init_matches_pretrained_forward() {
        use crate::model::OpCounter;
        let base = DenoiserModel::new_plain(probe_cfg(), 6).unwrap();
        let x = NumArray::col(vec![0.3, -0.6]);
        let mut ops = OpCounter::default();
        let eff0 = base.effective(WeightMode::Mean).unwrap();
        let y0 = base.forward_plain(&eff0, &x, 9, 1, &mut ops).unwrap();

        for spec in [
            AdapterSpec { variant: AdapterVariant::Full, bayesian: true, placement: Placement::AllLinear, sigma_init: 0.01, prior_sigma: 0.01 },
            AdapterSpec { variant: AdapterVariant::Lora { rank: 2 }, bayesian: false, placement: Placement::AllLinear, sigma_init: 0.01, prior_sigma: 0.01 },
            AdapterSpec { variant: AdapterVariant::Oft { block_size: None }, bayesian: true, placement: Placement::LinearNoConditioning, sigma_init: 0.01, prior_sigma: 0.01 },
        ] {
            let (wrapped, _) = apply_placement(base.clone(), &spec, 6).unwrap();
            let eff = wrapped.effective(WeightMode::Mean).unwrap();
            let y = wrapped.forward_plain(&eff, &x, 9, 1, &mut ops).unwrap();
            assert_eq!(y, y0, "spec {spec:?}");
        }
    }

    #[test]
    fn composing_adapters_is_rejected() {
        let model = DenoiserModel::new_plain(probe_cfg(), 7).unwrap();
        let lora = AdapterSpec {
            variant: AdapterVariant::Lora { rank: 1 },
            bayesian: false,
            placement: Placement::AllLinear,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        let (wrapped, _) = apply_placement(model, &lora, 7).unwrap();
        let oft = AdapterSpec {
            variant: AdapterVariant::Oft { block_size: None },
            bayesian: false,
            placement: Placement::AllLinear,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        assert!(matches!(apply_placement(wrapped, &oft, 7), Err(Error::Config(_))));
    }

    #[test]
    fn lora_on_norm_only_is_rejected() {
        let model = DenoiserModel::new_plain(probe_cfg(), 8).unwrap();
        let spec = AdapterSpec {
            variant: AdapterVariant::Lora { rank: 1 },
            bayesian: false,
            placement: Placement::NormOnly,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        assert!(matches!(apply_placement(model, &spec, 8), Err(Error::Config(_))));
    }

    #[test]
    fn non_bayesian_has_no_variational_params() {
        let model = DenoiserModel::new_plain(probe_cfg(), 9).unwrap();
        let spec = AdapterSpec {
            variant: AdapterVariant::Lora { rank: 2 },
            bayesian: false,
            placement: Placement::AllLinear,
            sigma_init: 0.01,
            prior_sigma: 0.01,
        };
        let (wrapped, report) = apply_placement(model, &spec, 9).unwrap();
        assert_eq!(report.stochastic_params, 0);
        let mut any = false;
        wrapped.visit_params(|_, pt| any |= pt.is_variational());
        assert!(!any);
    }
}
