//! `SARO` training-state sidecar stored next to a `SARW` checkpoint.
//!
//! Layout (little-endian): magic `SARO`, u32 version, architecture block
//! (same as the checkpoint), u32 optimizer kind (0 = sgd, 1 = adam), u64
//! optimizer step, u32 epochs completed, momentum-encoder tensors, Adam
//! first and second moments (adam only), u32 K, u32 D, the K queue columns
//! oldest-first, u32 history length, then per epoch u32 epoch, f64 mean
//! loss, f64 learning rate. All tensors are f32.

use std::path::{Path, PathBuf};

use super::optim::{OptimizerKind, OptimizerState};
use super::train::{EpochStats, TrainState};
use super::QueueMatrix;
use crate::binio::{read_all, write_atomic, Reader, Writer};
use crate::encoder::{
    decode_checkpoint, read_arch, read_tensors, save_checkpoint, write_arch, write_tensors,
    FeatureVector, ParamSet,
};
use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"SARO";
const VERSION: u32 = 1;

/// `model.sarw` -> `model.saro`
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("saro")
}

pub fn encode_state<T: Real>(state: &TrainState<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_arch(&mut w, state.params_k.arch());
    w.u32(match state.optimizer.kind() {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Adam => 1,
    });
    w.u64(state.optimizer.steps());
    w.u32(state.epochs_completed as u32);
    write_tensors(&mut w, &state.params_k);
    if let Some((m, v)) = state.optimizer.moments() {
        write_tensors(&mut w, m);
        write_tensors(&mut w, v);
    }
    w.u32(state.queue.capacity() as u32);
    w.u32(state.queue.dim() as u32);
    for col in state.queue.columns() {
        for v in col {
            w.f32(v.to_f32().unwrap_or(f32::NAN));
        }
    }
    w.u32(state.history.len() as u32);
    for s in &state.history {
        w.u32(s.epoch as u32);
        w.f64(s.mean_loss);
        w.f64(s.lr);
    }
    w.buf
}

/// Rebuilds a training state from the sidecar bytes and the primary
/// encoder parameters.
pub fn decode_state<T: Real>(bytes: &[u8], params_q: ParamSet<T>) -> Result<TrainState<T>> {
    let mut r = Reader::new(bytes, "training state");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let arch = read_arch(&mut r)?;
    if &arch != params_q.arch() {
        return Err(Error::ShapeMismatch("sidecar architecture differs from checkpoint".into()));
    }
    let kind = match r.u32()? {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Adam,
        k => return Err(Error::MalformedFile(format!("unknown optimizer kind {k}"))),
    };
    let step = r.u64()?;
    let epochs_completed = r.u32()? as usize;
    let params_k = read_tensors::<T>(&mut r, &arch)?;
    let moments = match kind {
        OptimizerKind::Sgd => None,
        OptimizerKind::Adam => Some((read_tensors::<T>(&mut r, &arch)?, read_tensors::<T>(&mut r, &arch)?)),
    };
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if dim != arch.dim || k == 0 {
        return Err(Error::MalformedFile(format!("queue shape {k}x{dim} is invalid")));
    }
    let raw = r.f32_vec(k * dim)?;
    let columns: Vec<FeatureVector<T>> = raw
        .chunks_exact(dim)
        .map(|c| FeatureVector(c.iter().map(|v| T::of(*v as f64)).collect()))
        .collect();
    let queue = QueueMatrix::from_columns(&columns)?;
    let n = r.u32()? as usize;
    let mut history = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        history.push(EpochStats {
            epoch: r.u32()? as usize,
            mean_loss: r.f64()?,
            lr: r.f64()?,
        });
    }
    r.finish()?;
    Ok(TrainState {
        params_q,
        params_k,
        queue,
        optimizer: OptimizerState::from_parts(kind, step, moments),
        epochs_completed,
        history,
    })
}

/// Writes the primary encoder to `checkpoint` and the rest of the state to
/// its `.saro` sidecar.
pub fn save_training<T: Real>(state: &TrainState<T>, checkpoint: impl AsRef<Path>) -> Result<()> {
    let checkpoint = checkpoint.as_ref();
    write_atomic(&sidecar_path(checkpoint), &encode_state(state))?;
    save_checkpoint(&state.params_q, checkpoint)
}

pub fn load_training<T: Real>(checkpoint: impl AsRef<Path>) -> Result<TrainState<T>> {
    let checkpoint = checkpoint.as_ref();
    let params_q = decode_checkpoint(&read_all(checkpoint)?)?;
    decode_state(&read_all(&sidecar_path(checkpoint))?, params_q)
}
