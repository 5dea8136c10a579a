//! Decoder checkpoints: configuration, named parameters, optimizer moments
//! and the step counter in one container file.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{DecoderConfig, OptimConfig};
use super::model::DitModel;
use super::optim::{AdamState, AdamW};
use crate::container;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"EZVCCKPT1\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DecoderConfig,
    pub optim: OptimConfig,
    pub step: u64,
    pub params: Vec<NamedTensor>,
    /// One entry per parameter, in the same order, when saved mid-training.
    pub optimizer: Option<Vec<AdamState>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: DecoderConfig,
    optim: OptimConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
    has_optimizer: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Snapshot a model, and the optimizer if given.
    pub fn capture(model: &DitModel, optim_cfg: &OptimConfig, optimizer: Option<&AdamW>, step: u64) -> Result<Self> {
        let params = model
            .params()
            .entries()
            .iter()
            .map(|(name, var)| -> Result<NamedTensor> {
                Ok(NamedTensor {
                    name: name.clone(),
                    shape: var.dims().to_vec(),
                    data: var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: model.config().clone(),
            optim: optim_cfg.clone(),
            step,
            params,
            optimizer: optimizer.map(|o| o.state().to_vec()),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            optim: self.optim.clone(),
            step: self.step,
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            has_optimizer: self.optimizer.is_some(),
        };
        let mut payload: Vec<f32> = self.params.iter().flat_map(|p| p.data.iter().copied()).collect();
        if let Some(states) = &self.optimizer {
            for s in states {
                payload.extend_from_slice(&s.m);
            }
            for s in states {
                payload.extend_from_slice(&s.v);
            }
        }
        container::encode(MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (Header, _) = container::decode(MAGIC, bytes)?;
        if header.version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {}", header.version)));
        }
        header.config.validate().map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
        let n_params: usize = sizes.iter().sum();
        let total = if header.has_optimizer { 3 * n_params } else { n_params };
        let data = container::read_f32s(payload, total, "checkpoint")?;

        let mut chunks = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &n in &sizes {
            chunks.push(at..at + n);
            at += n;
        }
        let params = header
            .tensors
            .into_iter()
            .zip(&chunks)
            .map(|(t, r)| NamedTensor {
                name: t.name,
                shape: t.shape,
                data: data[r.clone()].to_vec(),
            })
            .collect();
        let optimizer = header.has_optimizer.then(|| {
            chunks
                .iter()
                .map(|r| AdamState {
                    m: data[n_params + r.start..n_params + r.end].to_vec(),
                    v: data[2 * n_params + r.start..2 * n_params + r.end].to_vec(),
                })
                .collect()
        });
        Ok(Self {
            config: header.config,
            optim: header.optim,
            step: header.step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ArtifactMissing(path.to_path_buf()));
        }
        Self::from_bytes(&container::read_file(path)?)
    }

    /// Rebuild the model in `dtype` with the stored parameters.
    pub fn to_model(&self, dtype: DType) -> Result<DitModel> {
        let model = DitModel::new(self.config.clone(), dtype, 0)?;
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copy the stored parameters into an existing model of the same shape.
    pub fn load_into(&self, model: &DitModel) -> Result<()> {
        let entries = model.params().entries();
        if entries.len() != self.params.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                entries.len()
            )));
        }
        for ((name, var), stored) in entries.iter().zip(&self.params) {
            if *name != stored.name || var.dims() != stored.shape.as_slice() {
                return Err(Error::format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    stored.name,
                    stored.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(&stored.data, stored.shape.as_slice(), &Device::Cpu)?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}
