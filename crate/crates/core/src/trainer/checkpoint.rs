//! Binary checkpoint: `MMCK`, a u16 version, a u32 header length, a JSON
//! header, the parameter values in header order (little endian, header
//! dtype), then for each parameter the optimizer's `s`, `v` and `x0` as f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{DType, ParamStore, Real, Tensor};

use super::optim::{Madgrad, MadgradState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub momentum: f64,
    pub eps: f64,
    pub k: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: DType,
    /// Epochs completed when saved.
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerMeta>,
    /// Configuration the parameters belong to.
    pub job: serde_json::Value,
    /// Caller state needed to resume.
    pub progress: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor<T>>,
    pub optimizer: Option<Madgrad>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    opt: Option<&Madgrad>,
    epoch: usize,
    job: &serde_json::Value,
    progress: &serde_json::Value,
) -> Result<()> {
    let opt = opt.filter(|o| !o.state.is_empty());
    let header = CheckpointHeader {
        dtype: T::DTYPE,
        epoch,
        params: store.iter().map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
        optimizer: opt.map(|o| OptimizerMeta { momentum: o.momentum, eps: o.eps, k: o.k }),
        job: job.clone(),
        progress: progress.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + store.num_elements() * (T::DTYPE.size() + 24));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.iter() {
        p.value.data().iter().for_each(|v| v.write_le(&mut out));
    }
    if let Some(o) = opt {
        for st in &o.state {
            for part in [&st.s, &st.v, &st.x0] {
                part.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| err("file is truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4).map_err(|_| err("not a checkpoint"))? != CHECKPOINT_MAGIC {
        return Err(err("not a checkpoint"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len)?).map_err(|e| err(format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(err(format!("checkpoint holds {:?} values, expected {:?}", header.dtype, T::DTYPE)));
    }
    let size = T::DTYPE.size();
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let data = r.take(n * size)?.chunks_exact(size).map(T::read_le).collect();
        values.push(Tensor::new(p.shape.clone(), data).map_err(|e| err(e.to_string()))?);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(meta) => {
            let mut state = Vec::with_capacity(values.len());
            for v in &values {
                let mut part = || -> Result<Vec<f64>> {
                    Ok(r.take(v.numel() * 8)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
                };
                let (s, v, x0) = (part()?, part()?, part()?);
                state.push(MadgradState { s, v, x0 });
            }
            Some(Madgrad { momentum: meta.momentum, eps: meta.eps, k: meta.k, state })
        }
    };
    if r.at != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { header, values, optimizer })
}

impl<T: Real> Checkpoint<T> {
    /// Copies the saved values into `store`, which must have the same
    /// parameters with the same shapes.
    pub fn restore(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.len() != self.values.len() {
            return Err(err(format!("checkpoint has {} parameters, model has {}", self.values.len(), store.len())));
        }
        for (p, (entry, v)) in store.iter().zip(self.header.params.iter().zip(&self.values)) {
            if p.name != entry.name {
                return Err(err(format!("parameter {} found where {} was expected", entry.name, p.name)));
            }
            if p.value.shape() != v.shape() {
                return Err(err(format!("shape mismatch for {}: checkpoint {:?}, model {:?}", p.name, v.shape(), p.value.shape())));
            }
        }
        for (p, v) in store.iter_mut().zip(&self.values) {
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.header.params.iter().position(|p| p.name == name).map(|i| &self.values[i])
    }
}
