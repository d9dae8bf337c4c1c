//! Desk-scale laboratory for studying how few-shot fine-tuning corrupts small
//! denoising diffusion models, and how mean-field variational (Bayesian)
//! weight posteriors mitigate it.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`linalg`], [`tape`]: a minimal dense `f64` array with
//!   reverse-mode autodiff, enough for small MLP denoisers and the matrix
//!   algebra used by the adapters.
//! - [`schedule`], [`model`], [`diffusion`]: the DDPM substrate — noise
//!   schedules, a conditional MLP noise predictor, forward diffusion, loss,
//!   inversion, and samplers.
//! - [`vb`]: Gaussian variational parameters with reparameterized sampling
//!   and a closed-form KL against the frozen pretrained snapshot.
//! - [`adapters`]: full fine-tuning, low-rank (LoRA) and orthogonal (OFT)
//!   tuning algebras, their Bayesian variants, and placement patterns.
//! - [`analytic`]: the Gaussian world model of a fine-tuned denoiser, used
//!   both as a calculator and as an oracle against trained models.
//! - [`data`], [`optim`], [`trainer`]: toy datasets, Adam, and the seeded
//!   pretraining / fine-tuning loops.
//! - [`metrics`], [`probes`]: fidelity/diversity/quality analogs, the
//!   corruption-curve detector, and diagnostic probes.
//! - [`checkpoint`]: the versioned binary weight container.
//!
//! All randomness flows through explicitly derived seeds ([`rng`]); repeated
//! runs from the same configuration are bit-identical.

pub mod adapters;
pub mod analytic;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vb;

pub use error::{Error, Result};
pub use tensor::NumArray;
