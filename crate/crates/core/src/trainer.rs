//! Seeded training loops.
//!
//! Pretraining fits a plain model to the wide toy distribution; fine-tuning
//! wraps a pretrained snapshot with an adapter spec and runs the one-sample
//! objective: per iteration draw one posterior sample of every variational
//! weight, one training item, one timestep, one noise draw, and step Adam on
//! `L_DM + lambda * L_r` (plus an optional prior-preservation term on class
//! samples generated by the pretrained model).
//!
//! Every random draw comes from a stream derived from `(seed, stream, step)`
//! or `(seed, stream, slot, step)`, so identical configurations produce
//! bit-identical checkpoint series.

use serde::{Deserialize, Serialize};

use crate::adapters::{apply_placement, AdapterSpec, AdapterVariant, PlacementReport};
use crate::analytic::{estimate_sigma1, DenoiserPredictor};
use crate::data::DataConfig;
use crate::diffusion::{
    ancestral_sample, diffusion_loss, diffusion_loss_on_tape, Denoiser, SamplerConfig, SamplerMode,
};
use crate::error::{Error, Result};
use crate::metrics::{diversity, fidelity, quality, MetricsContext, MetricsRow};
use crate::model::{BindMode, DenoiserModel, ModelConfig, ParamTensor};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, seeded_rng, standard_normal, uniform_index, STREAM_METRIC, STREAM_PRIOR, STREAM_SIGMA1, STREAM_TRAIN};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::NumArray;
use crate::vb::kl_to_prior;

/// Loss ceiling beyond which training reports divergence.
pub const DIVERGENCE_CEILING: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_batch() -> usize {
    1
}
fn default_eval_every() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorPreservationConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Paper-default weight 1.0.
    #[serde(default = "default_prior_weight")]
    pub weight: f64,
    #[serde(default = "default_class_samples")]
    pub class_sample_count: usize,
}

fn default_prior_weight() -> f64 {
    1.0
}
fn default_class_samples() -> usize {
    16
}

impl Default for PriorPreservationConfig {
    fn default() -> Self {
        PriorPreservationConfig { enabled: false, weight: 1.0, class_sample_count: 16 }
    }
}

/// Checkpoint-time evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_eval_samples")]
    pub n_samples: usize,
    #[serde(default = "default_sampler_steps")]
    pub sampler_steps: usize,
    #[serde(default = "default_sigma1_t")]
    pub sigma1_t: usize,
    #[serde(default = "default_sigma1_samples")]
    pub sigma1_samples: usize,
    #[serde(default = "default_loss_t_points")]
    pub loss_t_points: usize,
    #[serde(default = "default_loss_eps_draws")]
    pub loss_eps_draws: usize,
}

fn default_eval_samples() -> usize {
    16
}
fn default_sampler_steps() -> usize {
    100
}
fn default_sigma1_t() -> usize {
    100
}
fn default_sigma1_samples() -> usize {
    9
}
fn default_loss_t_points() -> usize {
    8
}
fn default_loss_eps_draws() -> usize {
    2
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_samples: 16,
            sampler_steps: 100,
            sigma1_t: 100,
            sigma1_samples: 9,
            loss_t_points: 8,
            loss_eps_draws: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Weight of the KL regularizer in the combined objective.
    #[serde(default)]
    pub lambda: f64,
    pub adapter: AdapterSpec,
    #[serde(default)]
    pub prior_preservation: PriorPreservationConfig,
    #[serde(default = "default_cadence")]
    pub checkpoint_cadence: usize,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_cadence() -> usize {
    100
}

impl TrainConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.checkpoint_cadence == 0 {
            return Err(Error::Config("checkpoint cadence must be >= 1".into()));
        }
        if self.prior_preservation.enabled {
            if self.prior_preservation.weight < 0.0 {
                return Err(Error::Config("prior preservation weight must be >= 0".into()));
            }
            if self.prior_preservation.class_sample_count == 0 {
                return Err(Error::Config("prior preservation needs a non-empty class sample set".into()));
            }
        }
        if self.eval.n_samples < 2 {
            return Err(Error::Config("eval needs at least two generated samples".into()));
        }
        if self.eval.sampler_steps == 0 || self.eval.sampler_steps > sched.t_max() {
            return Err(Error::Config(format!(
                "eval sampler steps must be in 1..={}, got {}",
                sched.t_max(),
                self.eval.sampler_steps
            )));
        }
        if self.eval.sigma1_t == 0 || self.eval.sigma1_t > sched.t_max() {
            return Err(Error::Config(format!(
                "sigma1 estimation step must be in 1..={}, got {}",
                sched.t_max(),
                self.eval.sigma1_t
            )));
        }
        if self.eval.sigma1_samples == 0 || self.eval.loss_t_points == 0 || self.eval.loss_eps_draws == 0 {
            return Err(Error::Config("eval draw counts must be >= 1".into()));
        }
        self.adapter.validate()
    }
}

/// Toy-scale learning-rate defaults per variant.
pub fn default_learning_rate(variant: AdapterVariant) -> f64 {
    match variant {
        AdapterVariant::Full => 5e-4,
        AdapterVariant::Lora { .. } | AdapterVariant::Oft { .. } => 1e-3,
    }
}

/// Default iteration budget scaling with the number of training images.
pub fn default_iterations(n_shots: usize) -> usize {
    200 * n_shots.max(1)
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    pub model: DenoiserModel,
    /// `(iteration, evaluation loss)` pairs.
    pub losses: Vec<(usize, f64)>,
}

/// Evenly spaced timesteps in `[1, T]` for deterministic loss evaluation.
fn eval_t_grid(t_max: usize, points: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=points)
        .map(|j| ((j as f64) * (t_max as f64) / (points as f64)).ceil() as usize)
        .collect();
    ts.dedup();
    ts
}

/// Deterministic diffusion loss of the model on a dataset, averaged over a
/// timestep grid and fixed noise draws.
pub fn eval_diffusion_loss(
    den: &Denoiser,
    items: &[(usize, NumArray)],
    t_points: usize,
    eps_draws: usize,
    seed: u64,
) -> Result<f64> {
    let ts = eval_t_grid(den.sched.t_max(), t_points);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (label, x0)) in items.iter().enumerate() {
        for &t in &ts {
            for e in 0..eps_draws {
                let mut rng = seeded_rng(derive_seed(seed, &[STREAM_METRIC, 2, i as u64, t as u64, e as u64]));
                let eps = standard_normal(x0.rows(), 1, &mut rng);
                total += diffusion_loss(den, x0, t, &eps, *label)?;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Diffusion loss of the current model on class samples pre-generated from
/// the pretrained model (the prior-preservation term, unweighted).
pub fn prior_preservation_loss(
    current: &Denoiser,
    class_samples: &[(usize, NumArray)],
    seed: u64,
) -> Result<f64> {
    if class_samples.is_empty() {
        return Err(Error::Config("prior preservation needs class samples".into()));
    }
    eval_diffusion_loss(current, class_samples, 8, 1, derive_seed(seed, &[STREAM_PRIOR, 1]))
}

/// Trains a plain model on the wide distribution.
pub fn pretrain(
    data: &DataConfig,
    model_cfg: ModelConfig,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<PretrainResult> {
    data.validate()?;
    if cfg.iterations == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("pretrain iterations and batch size must be >= 1".into()));
    }
    if model_cfg.n_labels != data.n_classes() {
        return Err(Error::Config(format!(
            "model has {} labels but the dataset has {} classes",
            model_cfg.n_labels,
            data.n_classes()
        )));
    }
    let mut model = DenoiserModel::new_plain(model_cfg, cfg.seed)?;
    let n_slots = model.slot_infos().len();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), n_slots);
    let mut losses = Vec::new();

    // Fixed evaluation items keep the loss curve comparable across steps.
    let eval_items: Vec<(usize, NumArray)> = {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[STREAM_METRIC, 3]));
        (0..32).map(|_| data.sample(&mut rng)).collect()
    };

    for step in 0..cfg.iterations {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[STREAM_TRAIN, step as u64]));
        let mut tape = Tape::new();
        let binding = model.bind_on_tape(&mut tape, BindMode::Sample { seed: cfg.seed, step: step as u64 })?;
        let mut batch_nodes = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (label, x0) = data.sample(&mut rng);
            let t = 1 + uniform_index(sched.t_max(), &mut rng);
            let eps = standard_normal(x0.rows(), 1, &mut rng);
            batch_nodes.push(diffusion_loss_on_tape(&model, &mut tape, &binding, &x0, t, &eps, label, sched)?);
        }
        let mut loss_node = batch_nodes[0];
        for &n in &batch_nodes[1..] {
            loss_node = tape.add(loss_node, n)?;
        }
        if cfg.batch_size > 1 {
            loss_node = tape.scale(loss_node, 1.0 / cfg.batch_size as f64);
        }
        let loss = tape.scalar(loss_node);
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "pretraining loss".into(), step: Some(step) });
        }
        if loss > DIVERGENCE_CEILING {
            return Err(Error::Diverged { iteration: step, loss });
        }
        let grads = tape.backward(loss_node)?;
        let slot_grads = collect_slot_grads(&tape, &grads, n_slots);
        adam.begin_step();
        model.visit_slots_mut(|idx, arr| adam.update_slot(idx, arr, &slot_grads[idx]));

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.iterations {
            let den = Denoiser::mean(&model, sched)?;
            let eval = eval_diffusion_loss(&den, &eval_items, 8, 1, cfg.seed)?;
            losses.push((step + 1, eval));
        }
    }
    Ok(PretrainResult { model, losses })
}

/// Gradients per optimizer slot, in slot order. Leaf node ids on the tape
/// appear in slot order by construction of `bind_on_tape`.
fn collect_slot_grads(tape: &Tape, grads: &crate::tape::GradientMap, n_slots: usize) -> Vec<NumArray> {
    let mut out = Vec::with_capacity(n_slots);
    for id in 0..tape.len() {
        let node = crate::tape::NodeId(id);
        if tape.is_leaf(node) {
            out.push(grads.of(tape, node));
            if out.len() == n_slots {
                break;
            }
        }
    }
    debug_assert_eq!(out.len(), n_slots);
    out
}

/// One recorded checkpoint.
#[derive(Debug, Clone)]
pub struct SeriesEntry {
    pub iteration: usize,
    pub model: DenoiserModel,
    pub metrics: MetricsRow,
}

/// Full fine-tuning record: strictly increasing iterations, final state last.
#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub series: Vec<SeriesEntry>,
    pub placement: PlacementReport,
}

impl FinetuneRun {
    pub fn final_model(&self) -> &DenoiserModel {
        &self.series.last().expect("series is never empty").model
    }

    pub fn rows(&self) -> Vec<MetricsRow> {
        self.series.iter().map(|e| e.metrics.clone()).collect()
    }
}

/// Few-shot fine-tuning with per-cadence metric rows and model snapshots.
pub fn finetune(
    pretrained: &DenoiserModel,
    sched: &NoiseSchedule,
    dataset: &[(usize, NumArray)],
    cfg: &TrainConfig,
    metric_seed: u64,
) -> Result<FinetuneRun> {
    if dataset.is_empty() || dataset.len() > 16 {
        return Err(Error::Contract(format!("few-shot set size must be in 1..=16, got {}", dataset.len())));
    }
    cfg.validate(sched)?;
    for (label, x0) in dataset {
        if *label >= pretrained.cfg.n_labels || x0.shape() != (pretrained.cfg.data_dim, 1) {
            return Err(Error::Config("few-shot item does not match the model".into()));
        }
    }

    let (mut model, placement) = apply_placement(pretrained.clone(), &cfg.adapter, cfg.seed)?;
    let n_slots = model.slot_infos().len();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), n_slots);

    // Class samples for prior preservation come from the pretrained model.
    let class_samples: Vec<(usize, NumArray)> = if cfg.prior_preservation.enabled {
        let den = Denoiser::mean(pretrained, sched)?;
        (0..cfg.prior_preservation.class_sample_count)
            .map(|i| {
                let label = dataset[i % dataset.len()].0;
                let sampler = SamplerConfig {
                    steps: cfg.eval.sampler_steps,
                    seed: derive_seed(cfg.seed, &[STREAM_PRIOR, i as u64]),
                    mode: SamplerMode::Ancestral,
                };
                ancestral_sample(&den, &sampler, label).map(|x| (label, x))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let ctx = MetricsContext::new(
        metric_seed,
        pretrained.cfg.data_dim,
        raster_side_of(pretrained.cfg.data_dim),
    );

    let mut series = Vec::new();
    for iter in 0..=cfg.iterations {
        let at_cadence = iter % cfg.checkpoint_cadence == 0 || iter == cfg.iterations;
        if at_cadence {
            let metrics = evaluate_checkpoint(&model, sched, dataset, cfg, metric_seed, &ctx, iter)?;
            series.push(SeriesEntry { iteration: iter, model: model.clone(), metrics });
        }
        if iter == cfg.iterations {
            break;
        }

        let step = iter as u64;
        let mut rng = seeded_rng(derive_seed(cfg.seed, &[STREAM_TRAIN, step]));
        let mut tape = Tape::new();
        let binding = model.bind_on_tape(&mut tape, BindMode::Sample { seed: cfg.seed, step })?;

        let mut batch_nodes = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (label, x0) = &dataset[uniform_index(dataset.len(), &mut rng)];
            let t = 1 + uniform_index(sched.t_max(), &mut rng);
            let eps = standard_normal(x0.rows(), 1, &mut rng);
            batch_nodes.push(diffusion_loss_on_tape(&model, &mut tape, &binding, x0, t, &eps, *label, sched)?);
        }
        let mut ldm_node = batch_nodes[0];
        for &n in &batch_nodes[1..] {
            ldm_node = tape.add(ldm_node, n)?;
        }
        if cfg.batch_size > 1 {
            ldm_node = tape.scale(ldm_node, 1.0 / cfg.batch_size as f64);
        }

        let mut loss_node = ldm_node;
        if cfg.lambda > 0.0 {
            if let Some(kl) = binding.kl_total {
                let weighted = tape.scale(kl, cfg.lambda);
                loss_node = tape.add(loss_node, weighted)?;
            }
        }
        if cfg.prior_preservation.enabled && cfg.prior_preservation.weight > 0.0 {
            let (label, x0) = &class_samples[uniform_index(class_samples.len(), &mut rng)];
            let t = 1 + uniform_index(sched.t_max(), &mut rng);
            let eps = standard_normal(x0.rows(), 1, &mut rng);
            let prior_node = diffusion_loss_on_tape(&model, &mut tape, &binding, x0, t, &eps, *label, sched)?;
            let weighted = tape.scale(prior_node, cfg.prior_preservation.weight);
            loss_node = tape.add(loss_node, weighted)?;
        }

        let loss = tape.scalar(loss_node);
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: "fine-tuning loss".into(), step: Some(iter) });
        }
        if loss > DIVERGENCE_CEILING {
            return Err(Error::Diverged { iteration: iter, loss });
        }

        let grads = tape.backward(loss_node)?;
        let slot_grads = collect_slot_grads(&tape, &grads, n_slots);
        adam.begin_step();
        model.visit_slots_mut(|idx, arr| adam.update_slot(idx, arr, &slot_grads[idx]));
    }

    Ok(FinetuneRun { series, placement })
}

fn raster_side_of(dim: usize) -> Option<usize> {
    // Raster semantics only for square dims above the 2-D point case.
    let side = (dim as f64).sqrt().round() as usize;
    if dim > 4 && side * side == dim {
        Some(side)
    } else {
        None
    }
}

fn evaluate_checkpoint(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    dataset: &[(usize, NumArray)],
    cfg: &TrainConfig,
    metric_seed: u64,
    ctx: &MetricsContext,
    iteration: usize,
) -> Result<MetricsRow> {
    let den = Denoiser::mean(model, sched)?;
    let generated: Vec<NumArray> = (0..cfg.eval.n_samples)
        .map(|s| {
            let label = dataset[s % dataset.len()].0;
            let sampler = SamplerConfig {
                steps: cfg.eval.sampler_steps,
                seed: derive_seed(metric_seed, &[STREAM_METRIC, 1, s as u64]),
                mode: SamplerMode::Ancestral,
            };
            ancestral_sample(&den, &sampler, label)
        })
        .collect::<Result<_>>()?;
    let train_xs: Vec<NumArray> = dataset.iter().map(|(_, x)| x.clone()).collect();

    let fid = fidelity(ctx, &generated, &train_xs)?;
    let div = diversity(&generated)?;
    let qual = quality(ctx, &generated, &train_xs)?;

    let mut sigma1_rng = seeded_rng(derive_seed(metric_seed, &[STREAM_SIGMA1]));
    let predictor = DenoiserPredictor { den: &den, label: dataset[0].0 };
    let sigma1 = estimate_sigma1(
        &predictor,
        &dataset[0].1,
        cfg.eval.sigma1_t,
        cfg.eval.sigma1_samples,
        sched,
        &mut sigma1_rng,
    )?;

    let l_dm = eval_diffusion_loss(&den, dataset, cfg.eval.loss_t_points, cfg.eval.loss_eps_draws, metric_seed)?;
    let mut l_r = 0.0;
    model.visit_params(|_, pt| {
        if let ParamTensor::Variational(vp) = pt {
            l_r += kl_to_prior(vp);
        }
    });

    Ok(MetricsRow { iteration, fidelity: fid, diversity: div, quality: qual, sigma1, l_dm, l_r })
}
