//! Versioned checkpoint container.
//!
//! Layout: an 8-byte magic, a `u32` version, a `u64` header length, a JSON
//! header and a little-endian data section. The header carries the topology,
//! step counter, config echo, free-form metadata and a table of tensors with
//! their byte offsets; the data section holds model parameters, running
//! statistics and optimizer velocity as `f32`, and policy parameters as `f64`.

use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::PolicyState;
use crate::error::{Error, Result};
use crate::model::{MaskableModel, RunningStats, Tensor};
use crate::rng::SeedTree;
use crate::topology::ModelTopology;

const MAGIC: &[u8; 8] = b"EWSCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    topology: ModelTopology,
    step: u64,
    config: Option<serde_json::Value>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
    velocity: Vec<TensorEntry>,
    policy: Option<PolicyHeader>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PolicyHeader {
    hidden: usize,
    width: f64,
    baseline: Option<f64>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MaskableModel,
    pub step: u64,
    pub config: Option<serde_json::Value>,
    pub meta: serde_json::Value,
    pub velocity: Vec<Tensor>,
    pub policy: Option<PolicyState>,
}

impl Checkpoint {
    pub fn new(model: MaskableModel) -> Self {
        Self {
            model,
            step: 0,
            config: None,
            meta: serde_json::Value::Null,
            velocity: Vec::new(),
            policy: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut data: Vec<u8> = Vec::new();
        let push = |name: String, t: &Tensor, data: &mut Vec<u8>| {
            let entry = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset: data.len(),
            };
            for &v in t.iter() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            entry
        };
        let mut tensors = Vec::new();
        for p in self.model.params() {
            tensors.push(push(p.name.clone(), &p.value, &mut data));
        }
        for (i, rs) in self.model.running_stats().iter().enumerate() {
            let mean = Tensor::from_shape_vec(IxDyn(&[rs.mean.len()]), rs.mean.clone()).unwrap();
            let var = Tensor::from_shape_vec(IxDyn(&[rs.var.len()]), rs.var.clone()).unwrap();
            tensors.push(push(format!("norms.{i}.running_mean"), &mean, &mut data));
            tensors.push(push(format!("norms.{i}.running_var"), &var, &mut data));
        }
        let velocity = self
            .velocity
            .iter()
            .zip(self.model.params())
            .map(|(v, p)| push(format!("velocity.{}", p.name), v, &mut data))
            .collect();
        let policy = self.policy.as_ref().map(|p| {
            let offset = data.len();
            for v in &p.params {
                data.extend_from_slice(&v.to_le_bytes());
            }
            PolicyHeader {
                hidden: p.hidden,
                width: p.width,
                baseline: p.baseline,
                offset,
                len: p.params.len(),
            }
        });
        let header = Header {
            topology: self.model.topology().clone(),
            step: self.step,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors,
            velocity,
            policy,
        };
        let header = serde_json::to_vec_pretty(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: Header =
            serde_json::from_slice(bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?)?;
        let data = &bytes[20 + hlen..];
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| bad(format!("tensor {} is truncated", e.name)))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::from_shape_vec(IxDyn(&e.shape), values).unwrap())
        };

        // parameter values are overwritten below; the seed only fixes the layout
        let mut model = MaskableModel::new(header.topology.clone(), &mut SeedTree::new(0).stream("layout"))?;
        let by_name: std::collections::HashMap<&str, &TensorEntry> =
            header.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
        for p in model.params_mut() {
            let entry = by_name
                .get(p.name.as_str())
                .ok_or_else(|| bad(format!("missing tensor {}", p.name)))?;
            let t = read(entry)?;
            if t.shape() != p.value.shape() {
                return Err(bad(format!("tensor {} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        let n_norms = model.running_stats().len();
        for i in 0..n_norms {
            let get = |suffix: &str| -> Result<Vec<f32>> {
                let name = format!("norms.{i}.{suffix}");
                let entry = by_name.get(name.as_str()).ok_or_else(|| bad(format!("missing tensor {name}")))?;
                Ok(read(entry)?.into_raw_vec_and_offset().0)
            };
            let (mean, var) = (get("running_mean")?, get("running_var")?);
            let rs = &mut model.running_stats_mut()[i];
            if mean.len() != rs.mean.len() || var.len() != rs.var.len() {
                return Err(bad(format!("running statistics {i} have the wrong length")));
            }
            *rs = RunningStats { mean, var };
        }
        let velocity = header.velocity.iter().map(read).collect::<Result<Vec<_>>>()?;
        let policy = match &header.policy {
            None => None,
            Some(ph) => {
                let raw = data
                    .get(ph.offset..ph.offset + 8 * ph.len)
                    .ok_or_else(|| bad("policy parameters are truncated".into()))?;
                Some(PolicyState {
                    hidden: ph.hidden,
                    width: ph.width,
                    params: raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                    baseline: ph.baseline,
                })
            }
        };
        Ok(Self {
            model,
            step: header.step,
            config: header.config,
            meta: header.meta,
            velocity,
            policy,
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// SHA-256 over a model's parameters and running statistics.
pub fn model_hash(model: &MaskableModel) -> String {
    let mut h = Sha256::new();
    for p in model.params() {
        h.update(p.name.as_bytes());
        for v in p.value.iter() {
            h.update(v.to_le_bytes());
        }
    }
    for rs in model.running_stats() {
        for v in rs.mean.iter().chain(&rs.var) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
