//! Conditional MLP noise predictor.
//!
//! The network maps `(x_t, t, label)` to a noise estimate. Conditioning is
//! additive: a fixed sinusoidal time embedding plus a learned per-label
//! vector pass through a projection whose output is added to the first hidden
//! pre-activation. The layer list has a fixed wiring; the first half of the
//! backbone plays the role of a down block, the second half of an up block.
//!
//! Every weight tensor is a [`ParamTensor`]: plain (trainable value), frozen,
//! or variational (trainable Gaussian posterior). Forward passes run either
//! on a [`Tape`] for training or on plain arrays via [`EffectiveWeights`] for
//! sampling and probes; the two paths perform the identical op sequence.

use serde::{Deserialize, Serialize};

use crate::adapters::cayley_on_tape;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, standard_normal, STREAM_INIT, STREAM_PARAM_EPS};
use crate::tape::{NodeId, Tape, LAYER_NORM_EPS};
use crate::tensor::NumArray;
use crate::vb::{self, VariationalParameter};

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data dimension d (flat vectors; rasters are side*side).
    pub data_dim: usize,
    /// Backbone width.
    pub hidden_dim: usize,
    /// Conditioning embedding width (must be even).
    pub embed_dim: usize,
    /// Number of class labels.
    pub n_labels: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_dim < 2 || self.embed_dim < 2 || self.n_labels == 0 {
            return Err(Error::Config(format!("degenerate model dimensions: {self:?}")));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim must be even, got {}", self.embed_dim)));
        }
        Ok(())
    }
}

/// One weight tensor and how it is trained.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamTensor {
    /// Ordinary trainable value.
    Plain(NumArray),
    /// Not trainable; kept at its pretrained value.
    Frozen(NumArray),
    /// Trainable Gaussian posterior over the value.
    Variational(VariationalParameter),
}

impl ParamTensor {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            ParamTensor::Plain(v) | ParamTensor::Frozen(v) => v.shape(),
            ParamTensor::Variational(vp) => vp.mu.shape(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ParamTensor::Plain(v) | ParamTensor::Frozen(v) => v.len(),
            ParamTensor::Variational(vp) => vp.len(),
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, ParamTensor::Variational(_))
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, ParamTensor::Frozen(_))
    }
}

/// Positional role of a layer in the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelHalf {
    First,
    Second,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Backbone affine layer.
    Linear,
    /// Conditioning projection (embedding -> hidden).
    CondProj,
    /// Layer normalization with elementwise affine.
    Norm,
}

/// Weight algebra of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Dense {
        w: ParamTensor,
        b: ParamTensor,
    },
    /// `W = W0 + down * up` with `W0` frozen.
    Lora {
        w0: NumArray,
        b0: NumArray,
        down: ParamTensor,
        up: ParamTensor,
        rank: usize,
    },
    /// `W = blockdiag(cayley(Q_i)) * W0` with `W0` frozen.
    Oft {
        w0: NumArray,
        b0: NumArray,
        blocks: Vec<ParamTensor>,
        block_size: usize,
    },
    Norm {
        gain: ParamTensor,
        bias: ParamTensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub half: ModelHalf,
    pub weights: LayerWeights,
}

/// The denoiser: fixed wiring over a layer list plus a label embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub cfg: ModelConfig,
    pub layers: Vec<Layer>,
    /// One learned vector per class label, each `embed_dim x 1`.
    pub label_embed: Vec<ParamTensor>,
}

// Layer indices of the fixed wiring.
const L_IN: usize = 0;
const L_COND: usize = 1;
const L_NORM0: usize = 2;
const L_MID1: usize = 3;
const L_NORM1: usize = 4;
const L_MID2: usize = 5;
const L_OUT: usize = 6;

impl DenoiserModel {
    /// Fresh plain model with seeded Gaussian init (`std = 1/sqrt(fan_in)`),
    /// zero biases, unit norm gains.
    pub fn new_plain(cfg: ModelConfig, seed: u64) -> Result<DenoiserModel> {
        cfg.validate()?;
        let (d, h, e) = (cfg.data_dim, cfg.hidden_dim, cfg.embed_dim);
        let mut rng = seeded_rng(derive_seed(seed, &[STREAM_INIT]));
        let mut dense = |name: &str, kind: LayerKind, half: ModelHalf, rows: usize, cols: usize| Layer {
            name: name.to_string(),
            kind,
            half,
            weights: LayerWeights::Dense {
                w: ParamTensor::Plain(standard_normal(rows, cols, &mut rng).scale(1.0 / (cols as f64).sqrt())),
                b: ParamTensor::Plain(NumArray::zeros(rows, 1)),
            },
        };
        let norm = |name: &str, half: ModelHalf, n: usize| Layer {
            name: name.to_string(),
            kind: LayerKind::Norm,
            half,
            weights: LayerWeights::Norm {
                gain: ParamTensor::Plain(NumArray::filled(n, 1, 1.0)),
                bias: ParamTensor::Plain(NumArray::zeros(n, 1)),
            },
        };
        let layers = vec![
            dense("lin_in", LayerKind::Linear, ModelHalf::First, h, d),
            dense("cond_proj", LayerKind::CondProj, ModelHalf::First, h, e),
            norm("norm0", ModelHalf::First, h),
            dense("lin1", LayerKind::Linear, ModelHalf::First, h, h),
            norm("norm1", ModelHalf::Second, h),
            dense("lin2", LayerKind::Linear, ModelHalf::Second, h, h),
            dense("lin_out", LayerKind::Linear, ModelHalf::Second, d, h),
        ];
        let label_embed = (0..cfg.n_labels)
            .map(|_| ParamTensor::Plain(standard_normal(e, 1, &mut rng).scale(0.1)))
            .collect();
        Ok(DenoiserModel { cfg, layers, label_embed })
    }

    /// Fixed sinusoidal embedding of the timestep.
    pub fn time_embedding(&self, t: usize) -> NumArray {
        sinusoidal_embedding(t, self.cfg.embed_dim)
    }

    /// Visits every weight tensor in the canonical order (layers first, then
    /// label vectors) with a stable role name.
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, &'a ParamTensor)) {
        for layer in &self.layers {
            match &layer.weights {
                LayerWeights::Dense { w, b } => {
                    f(format!("{}.w", layer.name), w);
                    f(format!("{}.b", layer.name), b);
                }
                LayerWeights::Lora { down, up, .. } => {
                    f(format!("{}.lora_down", layer.name), down);
                    f(format!("{}.lora_up", layer.name), up);
                }
                LayerWeights::Oft { blocks, .. } => {
                    for (i, q) in blocks.iter().enumerate() {
                        f(format!("{}.oft_q{i}", layer.name), q);
                    }
                }
                LayerWeights::Norm { gain, bias } => {
                    f(format!("{}.gain", layer.name), gain);
                    f(format!("{}.bias", layer.name), bias);
                }
            }
        }
        for (i, v) in self.label_embed.iter().enumerate() {
            f(format!("label{i}"), v);
        }
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, &mut ParamTensor)) {
        for layer in &mut self.layers {
            match &mut layer.weights {
                LayerWeights::Dense { w, b } => {
                    f(format!("{}.w", layer.name), w);
                    f(format!("{}.b", layer.name), b);
                }
                LayerWeights::Lora { down, up, .. } => {
                    f(format!("{}.lora_down", layer.name), down);
                    f(format!("{}.lora_up", layer.name), up);
                }
                LayerWeights::Oft { blocks, .. } => {
                    for (i, q) in blocks.iter_mut().enumerate() {
                        f(format!("{}.oft_q{i}", layer.name), q);
                    }
                }
                LayerWeights::Norm { gain, bias } => {
                    f(format!("{}.gain", layer.name), gain);
                    f(format!("{}.bias", layer.name), bias);
                }
            }
        }
        for (i, v) in self.label_embed.iter_mut().enumerate() {
            f(format!("label{i}"), v);
        }
    }

    /// Names and shapes of the trainable slots, in optimizer order. A plain
    /// tensor contributes one slot, a variational tensor two (`mu`, `rho`).
    pub fn slot_infos(&self) -> Vec<SlotInfo> {
        let mut out = Vec::new();
        self.visit_params(|name, pt| match pt {
            ParamTensor::Plain(v) => out.push(SlotInfo { name, shape: v.shape() }),
            ParamTensor::Frozen(_) => {}
            ParamTensor::Variational(vp) => {
                out.push(SlotInfo { name: format!("{name}.mu"), shape: vp.mu.shape() });
                out.push(SlotInfo { name: format!("{name}.rho"), shape: vp.rho.shape() });
            }
        });
        out
    }

    /// Mutable walk over trainable slot arrays, in the same order as
    /// [`DenoiserModel::slot_infos`].
    pub fn visit_slots_mut(&mut self, mut f: impl FnMut(usize, &mut NumArray)) {
        let mut idx = 0;
        self.visit_params_mut(|_, pt| match pt {
            ParamTensor::Plain(v) => {
                f(idx, v);
                idx += 1;
            }
            ParamTensor::Frozen(_) => {}
            ParamTensor::Variational(vp) => {
                f(idx, &mut vp.mu);
                idx += 1;
                f(idx, &mut vp.rho);
                idx += 1;
            }
        });
    }

    /// Total trainable scalar parameters and how many of them are stochastic
    /// (counted per wrapped weight element, not per `(mu, rho)` pair).
    pub fn param_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts::default();
        self.visit_params(|_, pt| match pt {
            ParamTensor::Plain(v) => counts.trainable += v.len(),
            ParamTensor::Frozen(v) => counts.frozen += v.len(),
            ParamTensor::Variational(vp) => {
                counts.trainable += vp.len();
                counts.stochastic += vp.len();
            }
        });
        counts
    }

    /// Places the model on a tape: leaves for trainable slots, constants for
    /// frozen values, adapter algebra composed on-tape, one reparameterized
    /// draw per variational tensor (in [`BindMode::Sample`]), and the summed
    /// KL node over all variational tensors.
    pub fn bind_on_tape(&self, tape: &mut Tape, mode: BindMode) -> Result<TapeBinding> {
        let mut slot_idx = 0usize;
        let mut kl_total: Option<NodeId> = None;

        let mut bind_tensor = |tape: &mut Tape, pt: &ParamTensor| -> Result<NodeId> {
            match pt {
                ParamTensor::Plain(v) => {
                    slot_idx += 1;
                    Ok(tape.leaf(v.clone()))
                }
                ParamTensor::Frozen(v) => Ok(tape.constant(v.clone())),
                ParamTensor::Variational(vp) => {
                    let my_slot = slot_idx;
                    slot_idx += 2;
                    let eps = match mode {
                        BindMode::Sample { seed, step } => {
                            let mut rng = seeded_rng(derive_seed(seed, &[STREAM_PARAM_EPS, my_slot as u64, step]));
                            let (r, c) = vp.mu.shape();
                            Some(standard_normal(r, c, &mut rng))
                        }
                        BindMode::Mean => None,
                    };
                    let bound = vb::bind_on_tape(tape, vp, eps.as_ref());
                    let kl = vb::kl_on_tape(tape, &bound, &vp.prior_mean, vp.prior_sigma);
                    kl_total = Some(match kl_total {
                        Some(acc) => tape.add(acc, kl)?,
                        None => kl,
                    });
                    Ok(bound.theta)
                }
            }
        };

        let mut eff_layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let eff = match &layer.weights {
                LayerWeights::Dense { w, b } => {
                    let w_node = bind_tensor(tape, w)?;
                    let b_node = bind_tensor(tape, b)?;
                    EffLayerNode::Affine { w: w_node, b: b_node }
                }
                LayerWeights::Lora { w0, b0, down, up, .. } => {
                    let down_node = bind_tensor(tape, down)?;
                    let up_node = bind_tensor(tape, up)?;
                    let w0_node = tape.constant(w0.clone());
                    let delta = tape.matmul(down_node, up_node)?;
                    let w_node = tape.add(w0_node, delta)?;
                    let b_node = tape.constant(b0.clone());
                    EffLayerNode::Affine { w: w_node, b: b_node }
                }
                LayerWeights::Oft { w0, b0, blocks, block_size } => {
                    let mut parts = Vec::with_capacity(blocks.len());
                    for (i, q) in blocks.iter().enumerate() {
                        let q_node = bind_tensor(tape, q)?;
                        let r_node = cayley_on_tape(tape, q_node)?;
                        let w0_slice = tape.constant(w0.slice_rows(i * block_size, (i + 1) * block_size));
                        parts.push(tape.matmul(r_node, w0_slice)?);
                    }
                    let w_node = if parts.len() == 1 { parts[0] } else { tape.stack_rows(&parts)? };
                    let b_node = tape.constant(b0.clone());
                    EffLayerNode::Affine { w: w_node, b: b_node }
                }
                LayerWeights::Norm { gain, bias } => {
                    let g = bind_tensor(tape, gain)?;
                    let b = bind_tensor(tape, bias)?;
                    EffLayerNode::Norm { gain: g, bias: b }
                }
            };
            eff_layers.push(eff);
        }
        let labels = self
            .label_embed
            .iter()
            .map(|pt| bind_tensor(tape, pt))
            .collect::<Result<Vec<_>>>()?;

        Ok(TapeBinding { layers: eff_layers, labels, kl_total })
    }

    /// Forward pass recorded on the tape; returns the prediction node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x_t: &NumArray,
        t: usize,
        label: usize,
    ) -> Result<NodeId> {
        self.check_forward_input(x_t, label)?;
        let x = tape.constant(x_t.clone());
        let t_emb = tape.constant(self.time_embedding(t));
        let e = tape.add(t_emb, binding.labels[label])?;

        let affine = |tape: &mut Tape, layer: &EffLayerNode, input: NodeId| -> Result<NodeId> {
            let EffLayerNode::Affine { w, b } = layer else {
                return Err(Error::Contract("affine layer expected".into()));
            };
            let wx = tape.matmul(*w, input)?;
            tape.add(wx, *b).map_err(Into::into)
        };
        let norm = |tape: &mut Tape, layer: &EffLayerNode, input: NodeId| -> Result<NodeId> {
            let EffLayerNode::Norm { gain, bias } = layer else {
                return Err(Error::Contract("norm layer expected".into()));
            };
            tape.layer_norm(input, *gain, *bias).map_err(Into::into)
        };

        let c = affine(tape, &binding.layers[L_COND], e)?;
        let hx = affine(tape, &binding.layers[L_IN], x)?;
        let h = tape.add(hx, c)?;
        let h = norm(tape, &binding.layers[L_NORM0], h)?;
        let h = tape.silu(h);
        let h = affine(tape, &binding.layers[L_MID1], h)?;
        let h = norm(tape, &binding.layers[L_NORM1], h)?;
        let h = tape.silu(h);
        let h = affine(tape, &binding.layers[L_MID2], h)?;
        let h = tape.silu(h);
        affine(tape, &binding.layers[L_OUT], h)
    }

    /// Materializes plain effective weights (adapters folded in, variational
    /// tensors replaced by their mean or by one posterior draw).
    pub fn effective(&self, mode: WeightMode) -> Result<EffectiveWeights> {
        let mut slot_idx = 0usize;
        let mut resolve = |pt: &ParamTensor| -> NumArray {
            match pt {
                ParamTensor::Plain(v) => {
                    slot_idx += 1;
                    v.clone()
                }
                ParamTensor::Frozen(v) => v.clone(),
                ParamTensor::Variational(vp) => {
                    let my_slot = slot_idx;
                    slot_idx += 2;
                    match mode {
                        WeightMode::Mean => vb::mean_mode(vp),
                        WeightMode::Sample { seed, step } => {
                            let mut rng = seeded_rng(derive_seed(seed, &[STREAM_PARAM_EPS, my_slot as u64, step]));
                            vb::sample_param(vp, &mut rng).theta
                        }
                    }
                }
            }
        };

        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let eff = match &layer.weights {
                LayerWeights::Dense { w, b } => EffLayer::Affine { w: resolve(w), b: resolve(b) },
                LayerWeights::Lora { w0, b0, down, up, .. } => {
                    let delta = resolve(down).matmul(&resolve(up))?;
                    EffLayer::Affine { w: w0.add(&delta)?, b: b0.clone() }
                }
                LayerWeights::Oft { w0, b0, blocks, block_size } => {
                    let mut parts = Vec::with_capacity(blocks.len());
                    for (i, q) in blocks.iter().enumerate() {
                        let r = crate::adapters::cayley(&resolve(q))?;
                        parts.push(r.matmul(&w0.slice_rows(i * block_size, (i + 1) * block_size))?);
                    }
                    EffLayer::Affine { w: NumArray::stack_rows(&parts)?, b: b0.clone() }
                }
                LayerWeights::Norm { gain, bias } => EffLayer::Norm { gain: resolve(gain), bias: resolve(bias) },
            };
            layers.push(eff);
        }
        let labels = self.label_embed.iter().map(&mut resolve).collect();
        Ok(EffectiveWeights { layers, labels })
    }

    /// Plain forward pass over materialized weights. Mirrors
    /// [`DenoiserModel::forward_on_tape`] op for op; `ops` counts them.
    pub fn forward_plain(
        &self,
        eff: &EffectiveWeights,
        x_t: &NumArray,
        t: usize,
        label: usize,
        ops: &mut OpCounter,
    ) -> Result<NumArray> {
        self.check_forward_input(x_t, label)?;
        let t_emb = self.time_embedding(t);
        let e = t_emb.add(&eff.labels[label])?;
        ops.add += 1;

        let affine = |layer: &EffLayer, input: &NumArray, ops: &mut OpCounter| -> Result<NumArray> {
            let EffLayer::Affine { w, b } = layer else {
                return Err(Error::Contract("affine layer expected".into()));
            };
            ops.matmul += 1;
            ops.add += 1;
            Ok(w.matmul(input)?.add(b)?)
        };
        let norm = |layer: &EffLayer, input: &NumArray, ops: &mut OpCounter| -> Result<NumArray> {
            let EffLayer::Norm { gain, bias } = layer else {
                return Err(Error::Contract("norm layer expected".into()));
            };
            ops.norm += 1;
            Ok(layer_norm_plain(input, gain, bias)?)
        };
        let silu = |x: &NumArray, ops: &mut OpCounter| -> NumArray {
            ops.activation += 1;
            x.map(|v| v * crate::tensor::sigmoid(v))
        };

        let c = affine(&eff.layers[L_COND], &e, ops)?;
        let hx = affine(&eff.layers[L_IN], x_t, ops)?;
        let h = hx.add(&c)?;
        ops.add += 1;
        let h = norm(&eff.layers[L_NORM0], &h, ops)?;
        let h = silu(&h, ops);
        let h = affine(&eff.layers[L_MID1], &h, ops)?;
        let h = norm(&eff.layers[L_NORM1], &h, ops)?;
        let h = silu(&h, ops);
        let h = affine(&eff.layers[L_MID2], &h, ops)?;
        let h = silu(&h, ops);
        affine(&eff.layers[L_OUT], &h, ops)
    }

    fn check_forward_input(&self, x_t: &NumArray, label: usize) -> Result<()> {
        if x_t.shape() != (self.cfg.data_dim, 1) {
            return Err(Error::Contract(format!(
                "input shape {:?} does not match data_dim {}",
                x_t.shape_vec(),
                self.cfg.data_dim
            )));
        }
        if label >= self.cfg.n_labels {
            return Err(Error::Contract(format!("label {label} out of range (n_labels {})", self.cfg.n_labels)));
        }
        Ok(())
    }
}

/// How variational weights materialize.
#[derive(Debug, Clone, Copy)]
pub enum WeightMode {
    /// Posterior mean (inference).
    Mean,
    /// One reparameterized draw per tensor, stream keyed by `(seed, slot, step)`.
    Sample { seed: u64, step: u64 },
}

/// Tape-side twin of [`WeightMode`].
#[derive(Debug, Clone, Copy)]
pub enum BindMode {
    Mean,
    Sample { seed: u64, step: u64 },
}

#[derive(Debug, Clone, Copy)]
pub enum EffLayerNode {
    Affine { w: NodeId, b: NodeId },
    Norm { gain: NodeId, bias: NodeId },
}

/// Result of placing the model on a tape.
#[derive(Debug)]
pub struct TapeBinding {
    pub layers: Vec<EffLayerNode>,
    pub labels: Vec<NodeId>,
    /// Sum of per-tensor KL nodes; `None` when nothing is variational.
    pub kl_total: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub enum EffLayer {
    Affine { w: NumArray, b: NumArray },
    Norm { gain: NumArray, bias: NumArray },
}

/// Materialized weights for plain forward passes.
#[derive(Debug, Clone)]
pub struct EffectiveWeights {
    pub layers: Vec<EffLayer>,
    pub labels: Vec<NumArray>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotInfo {
    pub name: String,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
    pub stochastic: usize,
}

impl ParamCounts {
    pub fn stochastic_fraction(&self) -> f64 {
        if self.trainable == 0 {
            0.0
        } else {
            self.stochastic as f64 / self.trainable as f64
        }
    }
}

/// Operation tally for the plain forward path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub matmul: usize,
    pub add: usize,
    pub norm: usize,
    pub activation: usize,
}

impl OpCounter {
    pub fn total(&self) -> usize {
        self.matmul + self.add + self.norm + self.activation
    }
}

/// Transformer-style sinusoidal embedding of an integer timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> NumArray {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    NumArray::col(data)
}

/// Plain-array layer norm matching the tape op.
pub fn layer_norm_plain(x: &NumArray, gain: &NumArray, bias: &NumArray) -> Result<NumArray> {
    let mean = x.mean();
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    Ok(x.map(|v| (v - mean) * inv_std).mul(gain)?.add(bias)?)
}
