//! Versioned binary weight container.
//!
//! Layout: the magic string `BDLAB1`, a little-endian `u32` header length, a
//! JSON header (format version, schedule kind and step count, model
//! dimensions, and a manifest describing every layer and tensor), then the
//! raw weight arrays as little-endian `f64` in manifest order. Variational
//! tensors store `mu`, `rho`, and the frozen prior mean back to back, with
//! the prior scale carried in the manifest.
//!
//! Writes go through a temp file and rename, so readers never observe a
//! partial checkpoint.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenoiserModel, Layer, LayerKind, LayerWeights, ModelConfig, ModelHalf, ParamTensor};
use crate::schedule::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::tensor::NumArray;
use crate::vb::VariationalParameter;

pub const MAGIC: &[u8; 6] = b"BDLAB1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorManifest {
    rows: usize,
    cols: usize,
    mode: TensorMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
enum TensorMode {
    Plain,
    Frozen,
    Variational { prior_sigma: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
enum WeightsManifest {
    Dense { w: TensorManifest, b: TensorManifest },
    Lora { rank: usize, w0: TensorManifest, b0: TensorManifest, down: TensorManifest, up: TensorManifest },
    Oft { block_size: usize, w0: TensorManifest, b0: TensorManifest, blocks: Vec<TensorManifest> },
    Norm { gain: TensorManifest, bias: TensorManifest },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerManifest {
    name: String,
    kind: LayerKind,
    half: ModelHalf,
    weights: WeightsManifest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    schedule_kind: ScheduleKind,
    t_max: usize,
    model: ModelConfig,
    layers: Vec<LayerManifest>,
    label_table: Vec<TensorManifest>,
}

fn tensor_manifest(pt: &ParamTensor) -> TensorManifest {
    let (rows, cols) = pt.shape();
    let mode = match pt {
        ParamTensor::Plain(_) => TensorMode::Plain,
        ParamTensor::Frozen(_) => TensorMode::Frozen,
        ParamTensor::Variational(vp) => TensorMode::Variational { prior_sigma: vp.prior_sigma },
    };
    TensorManifest { rows, cols, mode }
}

fn plain_manifest(a: &NumArray) -> TensorManifest {
    TensorManifest { rows: a.rows(), cols: a.cols(), mode: TensorMode::Frozen }
}

struct ArrayWriter {
    bytes: Vec<u8>,
}

impl ArrayWriter {
    fn push_array(&mut self, a: &NumArray) {
        for v in a.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn push_tensor(&mut self, pt: &ParamTensor) {
        match pt {
            ParamTensor::Plain(v) | ParamTensor::Frozen(v) => self.push_array(v),
            ParamTensor::Variational(vp) => {
                self.push_array(&vp.mu);
                self.push_array(&vp.rho);
                self.push_array(&vp.prior_mean);
            }
        }
    }
}

/// Serializes a model (with its schedule identity) to the container format.
pub fn encode(model: &DenoiserModel, sched: &NoiseSchedule) -> Result<Vec<u8>> {
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let weights = match &layer.weights {
                LayerWeights::Dense { w, b } => WeightsManifest::Dense { w: tensor_manifest(w), b: tensor_manifest(b) },
                LayerWeights::Lora { w0, b0, down, up, rank } => WeightsManifest::Lora {
                    rank: *rank,
                    w0: plain_manifest(w0),
                    b0: plain_manifest(b0),
                    down: tensor_manifest(down),
                    up: tensor_manifest(up),
                },
                LayerWeights::Oft { w0, b0, blocks, block_size } => WeightsManifest::Oft {
                    block_size: *block_size,
                    w0: plain_manifest(w0),
                    b0: plain_manifest(b0),
                    blocks: blocks.iter().map(tensor_manifest).collect(),
                },
                LayerWeights::Norm { gain, bias } => {
                    WeightsManifest::Norm { gain: tensor_manifest(gain), bias: tensor_manifest(bias) }
                }
            };
            LayerManifest { name: layer.name.clone(), kind: layer.kind, half: layer.half, weights }
        })
        .collect();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        schedule_kind: sched.kind(),
        t_max: sched.t_max(),
        model: model.cfg,
        layers,
        label_table: model.label_embed.iter().map(tensor_manifest).collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding failed: {e}")))?;

    let mut writer = ArrayWriter { bytes: Vec::new() };
    for layer in &model.layers {
        match &layer.weights {
            LayerWeights::Dense { w, b } => {
                writer.push_tensor(w);
                writer.push_tensor(b);
            }
            LayerWeights::Lora { w0, b0, down, up, .. } => {
                writer.push_array(w0);
                writer.push_array(b0);
                writer.push_tensor(down);
                writer.push_tensor(up);
            }
            LayerWeights::Oft { w0, b0, blocks, .. } => {
                writer.push_array(w0);
                writer.push_array(b0);
                for q in blocks {
                    writer.push_tensor(q);
                }
            }
            LayerWeights::Norm { gain, bias } => {
                writer.push_tensor(gain);
                writer.push_tensor(bias);
            }
        }
    }
    for v in &model.label_embed {
        writer.push_tensor(v);
    }

    let mut out = Vec::with_capacity(6 + 4 + header_json.len() + writer.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&writer.bytes);
    Ok(out)
}

struct ArrayReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ArrayReader<'a> {
    fn take_array(&mut self, rows: usize, cols: usize) -> Result<NumArray> {
        let n = rows * cols;
        let need = n * 8;
        if self.pos + need > self.bytes.len() {
            return Err(Error::Format("checkpoint truncated inside a weight array".into()));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = self.pos + i * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&self.bytes[start..start + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        self.pos += need;
        NumArray::new(rows, cols, data).map_err(Into::into)
    }

    fn take_tensor(&mut self, m: &TensorManifest) -> Result<ParamTensor> {
        match m.mode {
            TensorMode::Plain => Ok(ParamTensor::Plain(self.take_array(m.rows, m.cols)?)),
            TensorMode::Frozen => Ok(ParamTensor::Frozen(self.take_array(m.rows, m.cols)?)),
            TensorMode::Variational { prior_sigma } => {
                let mu = self.take_array(m.rows, m.cols)?;
                let rho = self.take_array(m.rows, m.cols)?;
                let prior_mean = self.take_array(m.rows, m.cols)?;
                Ok(ParamTensor::Variational(VariationalParameter { mu, rho, prior_mean, prior_sigma }))
            }
        }
    }
}

/// Parses the container format back into a model and its schedule.
pub fn decode(bytes: &[u8]) -> Result<(DenoiserModel, NoiseSchedule)> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format("not a BDLAB1 checkpoint".into()));
    }
    let header_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if 10 + header_len > bytes.len() {
        return Err(Error::Format("checkpoint truncated inside the header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[10..10 + header_len])
        .map_err(|e| Error::Format(format!("header parse failed: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }

    let mut reader = ArrayReader { bytes, pos: 10 + header_len };
    let mut layers = Vec::with_capacity(header.layers.len());
    for lm in &header.layers {
        let weights = match &lm.weights {
            WeightsManifest::Dense { w, b } => LayerWeights::Dense {
                w: reader.take_tensor(w)?,
                b: reader.take_tensor(b)?,
            },
            WeightsManifest::Lora { rank, w0, b0, down, up } => LayerWeights::Lora {
                w0: reader.take_array(w0.rows, w0.cols)?,
                b0: reader.take_array(b0.rows, b0.cols)?,
                down: reader.take_tensor(down)?,
                up: reader.take_tensor(up)?,
                rank: *rank,
            },
            WeightsManifest::Oft { block_size, w0, b0, blocks } => LayerWeights::Oft {
                w0: reader.take_array(w0.rows, w0.cols)?,
                b0: reader.take_array(b0.rows, b0.cols)?,
                blocks: blocks.iter().map(|m| reader.take_tensor(m)).collect::<Result<_>>()?,
                block_size: *block_size,
            },
            WeightsManifest::Norm { gain, bias } => LayerWeights::Norm {
                gain: reader.take_tensor(gain)?,
                bias: reader.take_tensor(bias)?,
            },
        };
        layers.push(Layer { name: lm.name.clone(), kind: lm.kind, half: lm.half, weights });
    }
    let label_embed = header
        .label_table
        .iter()
        .map(|m| reader.take_tensor(m))
        .collect::<Result<Vec<_>>>()?;
    if reader.pos != bytes.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - reader.pos
        )));
    }

    let model = DenoiserModel { cfg: header.model, layers, label_embed };
    let sched = make_schedule(header.t_max, header.schedule_kind)?;
    Ok((model, sched))
}

pub fn save_model(path: &Path, model: &DenoiserModel, sched: &NoiseSchedule) -> Result<()> {
    let bytes = encode(model, sched)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(DenoiserModel, NoiseSchedule)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
