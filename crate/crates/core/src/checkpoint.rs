//! Binary training snapshots.
//!
//! Layout, all integers little-endian:
//! `DVAE1`, config echo (u64 length + UTF-8), epoch u64, step u64,
//! progress f64, parameter count u64, then per parameter its name
//! (u64 length + UTF-8), rows u64, cols u64 and values f64; Adam step u64
//! followed by the first and second moments in parameter order; chain
//! geometry (left u64, right u64, chains u64) and one byte per unit.
//!
//! Every random stream is keyed by `(seed, step)` or `(seed, epoch)`, so
//! the step and epoch counters are the complete sampler state.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rbm::GibbsChains;
use crate::trainer::Trainer;

pub const TAG: &[u8; 5] = b"DVAE1";

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn values(&mut self, t: &Tensor) {
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Length(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} does not fit in memory")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.usize(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self, rows: usize, cols: usize, what: &str) -> Result<Tensor> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("{what} shape {rows}x{cols} overflows")))?;
        let bytes = self.take(n, what)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(rows, cols, data)
    }
}

/// Serializes the full training state together with its configuration.
pub fn encode(cfg: &RunConfig, trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(TAG.to_vec());
    w.text(&cfg.to_text());
    w.u64(trainer.epoch as u64);
    w.u64(trainer.step);
    w.f64(trainer.progress);
    let entries = trainer.model.store.entries();
    w.u64(entries.len() as u64);
    for e in entries {
        w.text(&e.name);
        w.u64(e.value.rows() as u64);
        w.u64(e.value.cols() as u64);
        w.values(&e.value);
    }
    w.u64(trainer.adam.t);
    for t in trainer.adam.m.iter().chain(&trainer.adam.v) {
        w.values(t);
    }
    let c = &trainer.chains;
    w.u64(c.n_left() as u64);
    w.u64(c.n_right() as u64);
    w.u64(c.n_chains() as u64);
    w.0.extend_from_slice(c.as_bytes());
    w.0
}

/// Rebuilds the configuration and trainer, checking every stored shape
/// against a freshly instantiated model.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Trainer)> {
    if bytes.len() < TAG.len() || &bytes[..TAG.len()] != TAG {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(TAG.len())]).into_owned();
        return Err(Error::Format(format!("not a checkpoint: expected tag DVAE1, found {got:?}")));
    }
    let mut r = Reader {
        buf: bytes,
        pos: TAG.len(),
    };
    let cfg = RunConfig::parse(&r.text("config echo")?, &[])?;
    let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
    trainer.epoch = r.usize("epoch")?;
    trainer.step = r.u64("step")?;
    trainer.progress = r.f64("progress")?;

    let count = r.usize("parameter count")?;
    let store = &mut trainer.model.store;
    if count != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model has {}",
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (i, &id) in ids.iter().enumerate() {
        let name = r.text("parameter name")?;
        if name != store.name(id) {
            return Err(Error::Format(format!(
                "parameter {} is {name:?} in the checkpoint, {:?} in the model",
                i,
                store.name(id)
            )));
        }
        let (rows, cols) = (r.usize("rows")?, r.usize("cols")?);
        if (rows, cols) != store.get(id).shape() {
            return Err(Error::Format(format!(
                "parameter {name} has shape {rows}x{cols} in the checkpoint, {:?} in the model",
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = r.tensor(rows, cols, &name)?;
    }

    trainer.adam.t = r.u64("Adam step")?;
    let shapes: Vec<_> = ids.iter().map(|&id| trainer.model.store.get(id).shape()).collect();
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        trainer.adam.m[i] = r.tensor(rows, cols, "Adam first moment")?;
    }
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        trainer.adam.v[i] = r.tensor(rows, cols, "Adam second moment")?;
    }

    let (left, right, n) = (r.usize("chain left")?, r.usize("chain right")?, r.usize("chain count")?);
    let units = trainer.model.units();
    if left + right != units || left != trainer.model.cfg.n_left() {
        return Err(Error::Format(format!(
            "chains of {left}+{right} units do not fit a machine of {units}"
        )));
    }
    let states = n
        .checked_mul(units)
        .ok_or_else(|| Error::Format("chain count overflows".into()))?;
    trainer.chains = GibbsChains::from_states(left, right, r.take(states, "chain states")?.to_vec())?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the chain states",
            bytes.len() - r.pos
        )));
    }
    Ok((cfg, trainer))
}

pub fn save(path: &Path, cfg: &RunConfig, trainer: &Trainer) -> Result<()> {
    std::fs::write(path, encode(cfg, trainer)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Trainer)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
