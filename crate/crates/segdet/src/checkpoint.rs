//! Model checkpoints: a self-describing binary file holding the model
//! configuration, every named parameter, the batch-norm running statistics,
//! and (optionally) the optimizer state needed to resume training.
//!
//! Values are stored as little-endian IEEE doubles, so a save/load cycle is
//! bit-exact. Files are written to a temporary sibling and renamed into
//! place, so a crash mid-write never leaves a truncated checkpoint behind.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"SEGDETCK";
const VERSION: u32 = 1;

/// First- and second-moment accumulators for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlotState {
    /// Number of updates applied to this parameter.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Training progress stored alongside the weights when a run should be
/// resumable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainerState {
    pub step: u64,
    /// Most recent detection-phase loss.
    pub det_loss: f64,
    /// Most recent segmentation-phase loss.
    pub seg_loss: f64,
    /// Optimizer slots, keyed by parameter name.
    pub adam: Vec<(String, AdamSlotState)>,
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    push_u64(buf, s.len() as u64);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data(format!(
                "checkpoint truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::data(format!("length {v} does not fit usize")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::data("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.usize()?;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::data("checkpoint contains a non-UTF-8 name"))
    }
}

/// Serialize the model (and optionally the trainer) and atomically replace
/// whatever is at `path`.
pub fn save(path: &Path, model: &Model, trainer: Option<&TrainerState>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config_toml = toml::to_string(model.config())
        .map_err(|e| Error::config(format!("cannot serialize model config: {e}")))?;
    push_str(&mut buf, &config_toml);

    let params = model.named_params();
    push_u64(&mut buf, params.len() as u64);
    for (name, tensor) in &params {
        push_str(&mut buf, name);
        push_u64(&mut buf, tensor.rank() as u64);
        for extent in tensor.shape() {
            push_u64(&mut buf, *extent as u64);
        }
        push_f64s(&mut buf, &tensor.data());
    }

    let stats = model.segnet.named_stats();
    push_u64(&mut buf, stats.len() as u64);
    for (name, cell) in &stats {
        let s = cell.borrow();
        push_str(&mut buf, name);
        push_u64(&mut buf, s.mean.len() as u64);
        buf.extend_from_slice(&s.momentum.to_le_bytes());
        buf.extend_from_slice(&s.eps.to_le_bytes());
        push_f64s(&mut buf, &s.mean);
        push_f64s(&mut buf, &s.var);
    }

    match trainer {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            push_u64(&mut buf, state.step);
            buf.extend_from_slice(&state.det_loss.to_le_bytes());
            buf.extend_from_slice(&state.seg_loss.to_le_bytes());
            push_u64(&mut buf, state.adam.len() as u64);
            for (name, slot) in &state.adam {
                push_str(&mut buf, name);
                push_u64(&mut buf, slot.t);
                push_u64(&mut buf, slot.m.len() as u64);
                push_f64s(&mut buf, &slot.m);
                push_f64s(&mut buf, &slot.v);
            }
        }
    }

    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild a model (and trainer state, if stored) from a checkpoint.
pub fn load(path: &Path) -> Result<(Model, Option<TrainerState>)> {
    let buf = fs::read(path)
        .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::data(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    let config: ModelConfig = toml::from_str(&r.string()?)
        .map_err(|e| Error::data(format!("checkpoint config is invalid: {e}")))?;
    let model = Model::build(&config, 0)?;

    let mut live: std::collections::HashMap<String, crate::tensor::Tensor> =
        model.named_params().into_iter().collect();
    let param_count = r.usize()?;
    for _ in 0..param_count {
        let name = r.string()?;
        let rank = r.usize()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        let tensor = live.remove(&name).ok_or_else(|| {
            Error::data(format!("checkpoint parameter {name:?} is not in this model"))
        })?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::data(format!(
                "parameter {name:?} has shape {:?} in the checkpoint but {:?} in the model",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_data(data);
    }
    if !live.is_empty() {
        let mut missing: Vec<String> = live.into_keys().collect();
        missing.sort();
        return Err(Error::data(format!(
            "checkpoint lacks parameters: {}",
            missing.join(", ")
        )));
    }

    let mut live_stats: std::collections::HashMap<_, _> =
        model.segnet.named_stats().into_iter().collect();
    let stats_count = r.usize()?;
    for _ in 0..stats_count {
        let name = r.string()?;
        let channels = r.usize()?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let mean = r.f64s(channels)?;
        let var = r.f64s(channels)?;
        let cell = live_stats.remove(&name).ok_or_else(|| {
            Error::data(format!("checkpoint statistics {name:?} are not in this model"))
        })?;
        let mut s = cell.borrow_mut();
        if s.mean.len() != channels {
            return Err(Error::data(format!(
                "statistics {name:?} have {channels} channels in the checkpoint but {} in the model",
                s.mean.len()
            )));
        }
        s.momentum = momentum;
        s.eps = eps;
        s.mean = mean;
        s.var = var;
    }
    if !live_stats.is_empty() {
        return Err(Error::data("checkpoint lacks batch-norm statistics"));
    }

    let trainer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let det_loss = r.f64()?;
            let seg_loss = r.f64()?;
            let count = r.usize()?;
            let mut adam = Vec::with_capacity(count);
            for _ in 0..count {
                let name = r.string()?;
                let t = r.u64()?;
                let len = r.usize()?;
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                adam.push((name, AdamSlotState { t, m, v }));
            }
            Some(TrainerState {
                step,
                det_loss,
                seg_loss,
                adam,
            })
        }
        other => {
            return Err(Error::data(format!(
                "unexpected trainer-state tag {other} in checkpoint"
            )));
        }
    };
    if r.pos != buf.len() {
        return Err(Error::data(format!(
            "checkpoint has {} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok((model, trainer))
}
