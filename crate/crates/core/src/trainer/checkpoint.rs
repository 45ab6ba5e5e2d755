//! Binary checkpoint format.
//!
//! ```text
//! magic "MSVEDCKP" | u32 version | u64 header length | header JSON
//! u32 tensor count | per tensor: u32 name length, name, u32 rank,
//!                    rank x u64 dims, f64 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use msved_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::TrainingConfig;
use super::optim::Adadelta;
use crate::corpus::{TagSchema, Vocab};
use crate::error::{MsvedError, Result};
use crate::seq_model::{ModelConfig, ModelParams};
use crate::stochastic::AnnealState;

pub const MAGIC: &[u8; 8] = b"MSVEDCKP";
pub const VERSION: u32 = 1;

/// Where training stands; everything needed to continue exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    pub batch_in_epoch: usize,
    pub step: u64,
    pub anneal: AnnealState,
    pub best_dev_accuracy: Option<f64>,
    pub best_epoch: Option<u64>,
    pub epochs_since_best: usize,
    /// Sum of step objectives so far in the current epoch.
    pub epoch_objective: f64,
    pub finished: bool,
}

impl Progress {
    pub fn start(anneal: AnnealState) -> Self {
        Progress {
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            anneal,
            best_dev_accuracy: None,
            best_epoch: None,
            epochs_since_best: 0,
            epoch_objective: 0.0,
            finished: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub schema: TagSchema,
    pub schema_hash: String,
    pub vocab: Vocab,
    pub seed: u64,
    pub training: TrainingConfig,
    pub config_hash: String,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub optimizer: Adadelta,
    /// Parameters of the best epoch on the dev set.
    pub best: Option<ModelParams>,
}

const PARAM: &str = "param/";
const SQ_GRAD: &str = "adadelta/sq_grad/";
const SQ_UPDATE: &str = "adadelta/sq_update/";
const BEST: &str = "best/";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MsvedError::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| MsvedError::Checkpoint("length overflow".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| MsvedError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| MsvedError::Checkpoint("tensor size overflow".into()))?;
        let raw = self.take(numel.checked_mul(8).ok_or_else(|| MsvedError::Checkpoint("tensor size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| MsvedError::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(64 + header.len() + 8 * self.params.num_parameters() * 4);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, header.len() as u64);
        out.extend_from_slice(&header);
        let names = self.params.names();
        let groups = 3 + usize::from(self.best.is_some());
        put_u32(&mut out, (names.len() * groups) as u32);
        for (name, t) in names.iter().zip(self.params.tensors()) {
            put_tensor(&mut out, &format!("{PARAM}{name}"), t.shape(), t.data());
        }
        for (name, (t, v)) in names.iter().zip(self.params.tensors().iter().zip(&self.optimizer.sq_grad)) {
            put_tensor(&mut out, &format!("{SQ_GRAD}{name}"), t.shape(), v);
        }
        for (name, (t, v)) in names.iter().zip(self.params.tensors().iter().zip(&self.optimizer.sq_update)) {
            put_tensor(&mut out, &format!("{SQ_UPDATE}{name}"), t.shape(), v);
        }
        if let Some(best) = &self.best {
            for (name, t) in names.iter().zip(best.tensors()) {
                put_tensor(&mut out, &format!("{BEST}{name}"), t.shape(), t.data());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(MsvedError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MsvedError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.len()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        header.schema.validate()?;
        if header.schema.hash() != header.schema_hash {
            return Err(MsvedError::Checkpoint("schema hash does not match the stored schema".into()));
        }
        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut sq_grad = Vec::new();
        let mut sq_update = Vec::new();
        let mut best = Vec::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if let Some(n) = name.strip_prefix(PARAM) {
                params.push((n.to_string(), t));
            } else if name.starts_with(SQ_GRAD) {
                sq_grad.push(t.into_data());
            } else if name.starts_with(SQ_UPDATE) {
                sq_update.push(t.into_data());
            } else if let Some(n) = name.strip_prefix(BEST) {
                best.push((n.to_string(), t));
            } else {
                return Err(MsvedError::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(MsvedError::Checkpoint("trailing bytes after the last tensor".into()));
        }
        let sizes = header.schema.sizes();
        let vocab_size = header.vocab.len();
        let params = ModelParams::from_named(header.model, vocab_size, &sizes, params)?;
        let shapes_match = |bufs: &[Vec<f64>]| {
            bufs.len() == params.tensors().len()
                && bufs.iter().zip(params.tensors()).all(|(b, t)| b.len() == t.numel())
        };
        if !shapes_match(&sq_grad) || !shapes_match(&sq_update) {
            return Err(MsvedError::Checkpoint("optimizer state does not match parameters".into()));
        }
        let best = if best.is_empty() {
            None
        } else {
            Some(ModelParams::from_named(header.model, vocab_size, &sizes, best)?)
        };
        let optimizer = Adadelta {
            rho: header.training.rho,
            epsilon: header.training.epsilon,
            sq_grad,
            sq_update,
        };
        Ok(Checkpoint {
            header,
            params,
            optimizer,
            best,
        })
    }

    /// Writes atomically through a temporary file beside `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let ctx = || format!("writing {}", path.display());
        let mut f = fs::File::create(&tmp).map_err(|e| MsvedError::io(ctx(), e))?;
        f.write_all(&bytes).map_err(|e| MsvedError::io(ctx(), e))?;
        f.sync_all().map_err(|e| MsvedError::io(ctx(), e))?;
        fs::rename(&tmp, path).map_err(|e| MsvedError::io(ctx(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| MsvedError::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// The dev-selected parameters, or the latest when no epoch finished.
    pub fn inference_params(&self) -> &ModelParams {
        self.best.as_ref().unwrap_or(&self.params)
    }
}
