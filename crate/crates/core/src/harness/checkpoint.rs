//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `b"HCMACKPT"`, `u32` format version, `u64` header length, a JSON header
//! (run config, counters, parameter names and shapes), then every parameter
//! in header order as raw elements of the run's dtype, then the optimizer's
//! first moments and second moments as `f64`.

use super::config::RunConfig;
use super::optim::AdamState;
use super::train::TrainState;
use crate::error::{Error, Result};
use crate::module::Module;
use crate::network::HcmaUNet;
use crate::tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"HCMACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    step: u64,
    epoch: u64,
    optimizer_steps: u64,
    config: RunConfig,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint<T: Element>(path: &Path, model: &HcmaUNet<T>, state: &TrainState, config: &RunConfig) -> Result<()> {
    let named = model.named_params();
    let header = Header {
        dtype: T::DTYPE,
        step: state.step,
        epoch: state.epoch,
        optimizer_steps: state.adam.steps,
        config: config.clone(),
        params: named
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &named {
        buf.extend_from_slice(&T::to_le_bytes_vec(t.data()));
    }
    for moments in [&state.adam.m, &state.adam.v] {
        for m in moments.iter() {
            for v in m {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Reads the format version and run config without loading parameters.
pub fn peek_config(path: &Path) -> Result<RunConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(read_header(&bytes, path)?.0.config)
}

fn read_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(Header, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, r))
}

/// Rebuilds the model, training state and run config stored at `path`.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(HcmaUNet<T>, TrainState, RunConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut r) = read_header(&bytes, path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            path,
            format!("checkpoint holds {} parameters, {} requested", header.dtype, T::DTYPE),
        ));
    }
    let mut model = HcmaUNet::<T>::build(&header.config.model, header.config.seed)?;
    let expected = model.named_params();
    if expected.len() != header.params.len()
        || expected
            .iter()
            .zip(&header.params)
            .any(|((n, t), e)| *n != e.name || t.shape() != e.shape.as_slice())
    {
        return Err(Error::format(path, "parameter layout does not match the stored config"));
    }
    let size = T::DTYPE.size_bytes();
    let mut params = Vec::with_capacity(expected.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let data = T::from_le_bytes_slice(r.take(n * size)?);
        params.push(Tensor::from_vec(data, &e.shape)?.requires_grad());
    }
    let moments = |r: &mut Reader| -> Result<Vec<Vec<f64>>> {
        header
            .params
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                Ok(r.take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect())
            })
            .collect()
    };
    let m = moments(&mut r)?;
    let v = moments(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after optimizer state"));
    }
    model.set_parameters(params)?;
    let state = TrainState {
        step: header.step,
        epoch: header.epoch,
        adam: AdamState {
            steps: header.optimizer_steps,
            m,
            v,
        },
    };
    Ok((model, state, header.config))
}
