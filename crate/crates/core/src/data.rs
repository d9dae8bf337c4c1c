//! Toy data sources: labeled Gaussian mixtures (point clouds) and procedural
//! blob rasters.
//!
//! Pretraining plays the role of the wide pretrained distribution, so each
//! label's conditional mixes its own mode with a shared low-amplitude
//! background component centered at the origin — near-zero samples are part
//! of what the pretrained model learns, mirroring how a broadly trained
//! denoiser treats a blank input as in-distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, standard_normal, STREAM_DATA};
use crate::tensor::NumArray;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DataKind {
    /// Isotropic Gaussian modes in `dim` dimensions, one per label, centered
    /// on a ring (2-D) or on seeded random directions (higher dims).
    GaussianMixture {
        n_modes: usize,
        radius: f64,
        mode_sigma: f64,
        /// Probability mass of the shared background component at the origin.
        #[serde(default)]
        background_weight: f64,
        #[serde(default = "default_background_sigma")]
        background_sigma: f64,
    },
    /// `side x side` rasters of a Gaussian bump per class, with positional
    /// jitter. `dim` must equal `side * side`.
    Blobs {
        side: usize,
        n_classes: usize,
        amplitude: f64,
        blob_width: f64,
        center_jitter: f64,
    },
}

fn default_background_sigma() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub kind: DataKind,
    pub dim: usize,
    /// Seed for the dataset layout and the deterministic few-shot pool.
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DataKind::GaussianMixture { n_modes, mode_sigma, background_weight, background_sigma, .. } => {
                if *n_modes == 0 {
                    return Err(Error::Config("mixture needs at least one mode".into()));
                }
                if *mode_sigma <= 0.0 || *background_sigma <= 0.0 {
                    return Err(Error::Config("mixture sigmas must be positive".into()));
                }
                if !(0.0..1.0).contains(background_weight) {
                    return Err(Error::Config("background weight must be in [0, 1)".into()));
                }
                if self.dim == 0 {
                    return Err(Error::Config("dim must be positive".into()));
                }
            }
            DataKind::Blobs { side, n_classes, blob_width, .. } => {
                if *n_classes == 0 {
                    return Err(Error::Config("blobs need at least one class".into()));
                }
                if *side < 4 {
                    return Err(Error::Config("blob rasters need side >= 4".into()));
                }
                if side * side != self.dim {
                    return Err(Error::Config(format!(
                        "blob dim {} must equal side^2 = {}",
                        self.dim,
                        side * side
                    )));
                }
                if *blob_width <= 0.0 {
                    return Err(Error::Config("blob width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        match &self.kind {
            DataKind::GaussianMixture { n_modes, .. } => *n_modes,
            DataKind::Blobs { n_classes, .. } => *n_classes,
        }
    }

    /// Raster side length, when the data is image-shaped.
    pub fn raster_side(&self) -> Option<usize> {
        match &self.kind {
            DataKind::Blobs { side, .. } => Some(*side),
            DataKind::GaussianMixture { .. } => None,
        }
    }

    /// Mode centers (mixtures) or noiseless class rasters (blobs).
    pub fn class_centers(&self) -> Vec<NumArray> {
        match &self.kind {
            DataKind::GaussianMixture { n_modes, radius, .. } => {
                if self.dim == 2 {
                    (0..*n_modes)
                        .map(|m| {
                            let angle = 2.0 * std::f64::consts::PI * m as f64 / *n_modes as f64;
                            NumArray::col(vec![radius * angle.cos(), radius * angle.sin()])
                        })
                        .collect()
                } else {
                    let mut rng = seeded_rng(derive_seed(self.seed, &[STREAM_DATA, 0xCE17]));
                    (0..*n_modes)
                        .map(|_| {
                            let dir = standard_normal(self.dim, 1, &mut rng);
                            dir.scale(*radius / dir.l2_norm())
                        })
                        .collect()
                }
            }
            DataKind::Blobs { side, amplitude, blob_width, .. } => self
                .blob_positions()
                .into_iter()
                .map(|(cy, cx)| blob_raster(*side, cy, cx, *amplitude, *blob_width))
                .collect(),
        }
    }

    /// One draw conditioned on a label.
    pub fn sample_for_label(&self, label: usize, rng: &mut ChaCha8Rng) -> NumArray {
        debug_assert!(label < self.n_classes());
        match &self.kind {
            DataKind::GaussianMixture { mode_sigma, background_weight, background_sigma, .. } => {
                let centers = self.class_centers();
                if rng.gen::<f64>() < *background_weight {
                    standard_normal(self.dim, 1, rng).scale(*background_sigma)
                } else {
                    let noise = standard_normal(self.dim, 1, rng).scale(*mode_sigma);
                    centers[label].add(&noise).expect("same shape")
                }
            }
            DataKind::Blobs { side, amplitude, blob_width, center_jitter, .. } => {
                let (cy, cx) = self.blob_positions()[label];
                let jy: f64 = rng.gen_range(-*center_jitter..=*center_jitter);
                let jx: f64 = rng.gen_range(-*center_jitter..=*center_jitter);
                blob_raster(*side, cy + jy, cx + jx, *amplitude, *blob_width)
            }
        }
    }

    /// One labeled draw with the label chosen uniformly.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (usize, NumArray) {
        let label = rng.gen_range(0..self.n_classes());
        (label, self.sample_for_label(label, rng))
    }

    /// Deterministic pool entry `i`: label `i % n_classes`, sample drawn from
    /// a stream keyed by `(seed, i)`. Few-shot sets are selections from this
    /// pool, so anchor identity is stable across runs and processes.
    pub fn pool_item(&self, index: usize) -> (usize, NumArray) {
        let label = index % self.n_classes();
        let mut rng = seeded_rng(derive_seed(self.seed, &[STREAM_DATA, 1, index as u64]));
        (label, self.sample_for_label(label, &mut rng))
    }

    pub fn few_shot_set(&self, indices: &[usize]) -> Result<Vec<(usize, NumArray)>> {
        if indices.is_empty() {
            return Err(Error::Config("few-shot set needs at least one index".into()));
        }
        Ok(indices.iter().map(|&i| self.pool_item(i)).collect())
    }
}

impl DataConfig {
    /// Seeded blob centers, one per class.
    fn blob_positions(&self) -> Vec<(f64, f64)> {
        let DataKind::Blobs { side, n_classes, .. } = &self.kind else {
            return Vec::new();
        };
        let mut rng = seeded_rng(derive_seed(self.seed, &[STREAM_DATA, 0xCE17]));
        (0..*n_classes)
            .map(|_| {
                let cy = rng.gen_range(2.0..(*side as f64 - 3.0));
                let cx = rng.gen_range(2.0..(*side as f64 - 3.0));
                (cy, cx)
            })
            .collect()
    }
}

fn blob_raster(side: usize, cy: f64, cx: f64, amplitude: f64, width: f64) -> NumArray {
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            data.push(amplitude * (-(dy * dy + dx * dx) / (2.0 * width * width)).exp());
        }
    }
    NumArray::col(data)
}
