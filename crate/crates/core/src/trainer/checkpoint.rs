//! The XCKPT1 checkpoint format.
//!
//! ```text
//! "XCKPT1" | u32 LE header length | header JSON | f32 LE blocks in header order
//! ```
//! The header holds the config, the canonical layout string, the step,
//! the metric table and the `(name, shape)` list of blocks: every
//! parameter in store order, then `adam.m.*` and `adam.v.*` moments when an
//! optimizer state is saved.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::OptimizerState;
use crate::autodiff::{ParamStore, Tensor};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::PolicyModel;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"XCKPT1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    /// Mean training L1 since the previous validation.
    pub train_l1: Option<f64>,
    /// Validation MSE per dataset.
    pub val_mse: BTreeMap<String, f64>,
    pub mean_val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: Config,
    layout: String,
    step: u64,
    optimizer_step: Option<u64>,
    metrics: Metrics,
    blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub layout: String,
    pub step: u64,
    pub metrics: Metrics,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut tensors: Vec<&Tensor<f32>> = Vec::new();
        for id in self.params.ids() {
            blocks.push(BlockSpec {
                name: self.params.name(id).to_owned(),
                shape: self.params.get(id).shape().to_vec(),
            });
            tensors.push(self.params.get(id));
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adam.m", &opt.m), ("adam.v", &opt.v)] {
                for (id, t) in self.params.ids().zip(moments) {
                    blocks.push(BlockSpec {
                        name: format!("{prefix}.{}", self.params.name(id)),
                        shape: t.shape().to_vec(),
                    });
                    tensors.push(t);
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            layout: self.layout.clone(),
            step: self.step,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            metrics: self.metrics.clone(),
            blocks,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str, at: usize| Error::Corruption {
            offset: bytes.len() as u64,
            reason: format!("truncated while reading {what} at byte {at}"),
        };
        let n = CHECKPOINT_MAGIC.len();
        if bytes.len() < n {
            return Err(truncated("magic", 0));
        }
        if &bytes[..n] != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected XCKPT1",
                String::from_utf8_lossy(&bytes[..n])
            )));
        }
        let len_bytes = bytes.get(n..n + 4).ok_or_else(|| truncated("header length", n))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(n + 4..n + 4 + len)
            .ok_or_else(|| truncated("header", n + 4))?;
        let header: Header = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut pos = n + 4 + len;
        let mut values: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut order = Vec::new();
        for b in &header.blocks {
            let count: usize = b.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * count)
                .ok_or_else(|| truncated(&format!("block `{}`", b.name), pos))?;
            pos += 4 * count;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            values.insert(b.name.clone(), Tensor::new(&b.shape, data)?);
            order.push(b.name.clone());
        }
        if pos != bytes.len() {
            return Err(Error::Corruption {
                offset: pos as u64,
                reason: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        let mut params = ParamStore::new();
        let (_, template) = PolicyModel::init::<f32>(&header.config, 0)?;
        let mut names = Vec::new();
        for id in template.ids() {
            let name = template.name(id);
            let t = values.remove(name).ok_or_else(|| Error::Lookup {
                kind: "checkpoint block",
                name: name.to_owned(),
            })?;
            if t.shape() != template.get(id).shape() {
                return Err(Error::dim(format!(
                    "block `{name}` is {:?}, model expects {:?}",
                    t.shape(),
                    template.get(id).shape()
                )));
            }
            params.insert(name, t, template.decays(id));
            names.push(name.to_owned());
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let mut take = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
                    names
                        .iter()
                        .map(|n| {
                            let key = format!("{prefix}.{n}");
                            values.remove(&key).ok_or(Error::Lookup {
                                kind: "checkpoint block",
                                name: key,
                            })
                        })
                        .collect()
                };
                let m = take("adam.m")?;
                let v = take("adam.v")?;
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        if let Some(extra) = values.keys().next() {
            return Err(Error::Format(format!("unexpected checkpoint block `{extra}`")));
        }
        Ok(Self {
            config: header.config,
            layout: header.layout,
            step: header.step,
            metrics: header.metrics,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model around the stored parameters.
    pub fn policy(&self) -> Result<(PolicyModel, ParamStore<f32>)> {
        let (model, _) = PolicyModel::init::<f32>(&self.config, 0)?;
        let canonical = model.layout.canonical();
        if canonical != self.layout {
            return Err(Error::Compatibility {
                checkpoint: self.layout.clone(),
                config: canonical,
            });
        }
        Ok((model, self.params.clone()))
    }

    /// Fails unless the checkpoint's layout equals the one `config` builds.
    pub fn check_compatible(&self, config: &Config) -> Result<()> {
        let (model, _) = PolicyModel::init::<f32>(config, 0)?;
        let canonical = model.layout.canonical();
        if canonical != self.layout {
            return Err(Error::Compatibility {
                checkpoint: self.layout.clone(),
                config: canonical,
            });
        }
        Ok(())
    }
}
