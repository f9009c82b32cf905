//! Checkpoints: a TSWT weights payload holding the current head, the best
//! snapshot (`best/` prefix) and momentum buffers (`momentum/` prefix),
//! followed by a `TSCK` training-state block.

use std::fs;
use std::path::Path;

use super::{EarlyStopper, EpochLog, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nn::{decode_weights, encode_weights, ModelWeights, SgdState};

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;
const BEST: &str = "best/";
const MOMENTUM: &str = "momentum/";

fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut all = ModelWeights::new();
    for p in state.weights.params() {
        all.push(p.name.clone(), p.tensor.clone(), false)?;
    }
    for p in state.best_weights.params() {
        all.push(format!("{BEST}{}", p.name), p.tensor.clone(), false)?;
    }
    for (name, v) in &state.optimizer.velocity {
        all.push(format!("{MOMENTUM}{name}"), v.clone(), false)?;
    }
    let mut buf = encode_weights(&all)?;
    let u32le = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = &state.config;
    buf.extend_from_slice(&c.learning_rate.to_le_bytes());
    buf.extend_from_slice(&c.momentum.to_le_bytes());
    u32le(&mut buf, c.batch_size);
    u32le(&mut buf, c.patience);
    u32le(&mut buf, c.max_epochs);
    buf.extend_from_slice(&state.run_seed.to_le_bytes());
    u32le(&mut buf, state.epoch);
    buf.extend_from_slice(&state.stopper.best_val_loss.to_le_bytes());
    u32le(&mut buf, state.stopper.best_epoch);
    u32le(&mut buf, state.stopper.patience_counter);
    buf.push(state.finished as u8);
    u32le(&mut buf, state.history.len());
    for e in &state.history {
        u32le(&mut buf, e.epoch);
        for v in [e.train_loss, e.val_loss, e.seconds] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::format("checkpoint state block truncated"))?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn decode(bytes: &[u8]) -> Result<TrainState> {
    let (all, used) = decode_weights(bytes)?;
    let mut weights = ModelWeights::new();
    let mut best_weights = ModelWeights::new();
    let mut optimizer = SgdState::default();
    for p in all.params() {
        if let Some(name) = p.name.strip_prefix(BEST) {
            best_weights.push(name, p.tensor.clone(), false)?;
        } else if let Some(name) = p.name.strip_prefix(MOMENTUM) {
            optimizer
                .velocity
                .push((name.to_string(), p.tensor.clone()));
        } else {
            weights.push(p.name.clone(), p.tensor.clone(), false)?;
        }
    }
    let mut r = Reader { bytes, pos: used };
    if &r.take::<4>()? != MAGIC {
        return Err(Error::format("missing checkpoint state block"));
    }
    let version = u32::from_le_bytes(r.take()?);
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = TrainConfig {
        learning_rate: f32::from_le_bytes(r.take()?),
        momentum: f32::from_le_bytes(r.take()?),
        batch_size: r.u32()?,
        patience: r.u32()?,
        max_epochs: r.u32()?,
    };
    config
        .validate()
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let run_seed = u64::from_le_bytes(r.take()?);
    let epoch = r.u32()?;
    let stopper = EarlyStopper {
        patience: config.patience,
        best_val_loss: r.f64()?,
        best_epoch: r.u32()?,
        patience_counter: r.u32()?,
    };
    let finished = match r.take::<1>()?[0] {
        0 => false,
        1 => true,
        f => return Err(Error::format(format!("bad finished flag {f}"))),
    };
    let n = r.u32()?;
    let mut history = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        history.push(EpochLog {
            epoch: r.u32()?,
            train_loss: r.f64()?,
            val_loss: r.f64()?,
            seconds: r.f64()?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    if history.len() != epoch || stopper.best_epoch > epoch {
        return Err(Error::format("checkpoint epoch counters are inconsistent"));
    }
    let names = |w: &ModelWeights| {
        w.params()
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    if names(&weights) != names(&best_weights) {
        return Err(Error::format(
            "best snapshot does not match the current weights",
        ));
    }
    Ok(TrainState {
        config,
        run_seed,
        epoch,
        stopper,
        finished,
        history,
        weights,
        best_weights,
        optimizer,
    })
}

/// Writes through a temporary file so an interrupted write never leaves a
/// truncated checkpoint behind.
pub fn write_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(state)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Loads a checkpoint for continuation. Any unreadable or invalid checkpoint,
/// including a missing file, is a format error.
pub fn resume(path: &Path) -> Result<TrainState> {
    match read_checkpoint(path) {
        Err(Error::Io { path, source }) => Err(Error::format(format!(
            "cannot read checkpoint {}: {source}",
            path.display()
        ))),
        other => other,
    }
}
