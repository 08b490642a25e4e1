//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `RQWAVCKP`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header, then raw little-endian
//! `f64` data: every parameter tensor in header order, followed by the AdamW
//! first and second moments in the same order. Random streams are derived
//! from the config seeds and the step counter, so the step is the whole RNG
//! state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Grads, ParamStore};
use crate::train::{Running, TrainState};

pub const MAGIC: &[u8; 8] = b"RQWAVCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: String,
    pub config_hash: String,
    pub step: u64,
    pub optimizer_t: u64,
    pub running: Running,
    pub params_fingerprint: String,
    pub quantizer_fingerprint: String,
    pub tensors: Vec<TensorEntry>,
}

fn write_tensors<'a>(w: &mut impl Write, tensors: impl Iterator<Item = &'a ArrayD<f64>>) -> Result<()> {
    for t in tensors {
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_state(path: &Path, state: &TrainState) -> Result<()> {
    let p = &state.model.params;
    let header = Header {
        config: state.model.cfg.echo(),
        config_hash: state.model.cfg.hash(),
        step: state.step,
        optimizer_t: state.optimizer.t,
        running: state.running.clone(),
        params_fingerprint: p.fingerprint(),
        quantizer_fingerprint: state.model.quantizer.fingerprint(),
        tensors: p
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensors(&mut w, p.iter().map(|(_, t)| t))?;
        write_tensors(&mut w, state.optimizer.m.iter())?;
        write_tensors(&mut w, state.optimizer.v.iter())?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<ArrayD<f64>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(self.bytes::<8>()?));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape product matches"))
    }
}

fn read_header(r: &mut Reader<impl Read>) -> Result<Header> {
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.bytes::<4>()?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(r.bytes::<8>()?) as usize;
    let mut json = vec![0u8; len];
    r.inner
        .read_exact(&mut json)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(serde_json::from_slice(&json)?)
}

fn fill(store_shapes: &ParamStore, header: &Header) -> Result<()> {
    if store_shapes.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            store_shapes.len()
        )));
    }
    for ((name, t), e) in store_shapes.iter().zip(&header.tensors) {
        if name != e.name || t.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {name} {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn read_header_only(path: &Path) -> Result<Header> {
    read_header(&mut Reader {
        inner: BufReader::new(File::open(path)?),
    })
}

/// Restores the full training state.
pub fn load_state(path: &Path) -> Result<TrainState> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let header = read_header(&mut r)?;
    let cfg = RunConfig::from_echo(&header.config)?;
    let mut state = TrainState::new(&cfg)?;
    fill(&state.model.params, &header)?;
    for (_, t) in state.model.params.iter_mut() {
        let shape = t.shape().to_vec();
        *t = r.tensor(&shape)?;
    }
    let shapes: Vec<Vec<usize>> = header.tensors.iter().map(|e| e.shape.clone()).collect();
    let read_moments = |r: &mut Reader<_>, g: &mut Grads| -> Result<()> {
        for (t, shape) in g.iter_mut().zip(&shapes) {
            *t = r.tensor(shape)?;
        }
        Ok(())
    };
    read_moments(&mut r, &mut state.optimizer.m)?;
    read_moments(&mut r, &mut state.optimizer.v)?;
    if r.inner.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    state.step = header.step;
    state.optimizer.t = header.optimizer_t;
    state.running = header.running.clone();
    if state.model.params.fingerprint() != header.params_fingerprint {
        return Err(Error::Checkpoint("parameter fingerprint mismatch".into()));
    }
    if state.model.quantizer.fingerprint() != header.quantizer_fingerprint {
        return Err(Error::Checkpoint("quantizer rebuilt from seed differs from the stored one".into()));
    }
    Ok(state)
}

/// Loads only what inference needs.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_state(path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut cfg = RunConfig::desk();
        cfg.encoder.layers = 1;
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 7;
        state.optimizer.t = 7;
        for t in state.optimizer.m.iter_mut() {
            t.mapv_inplace(|_| 0.1f64.sqrt());
        }
        state.running.loss_sum = 1.0 / 3.0;
        save_state(&path, &state).unwrap();
        let back = load_state(&path).unwrap();
        assert_eq!(back.step, 7);
        assert_eq!(back.model.params, state.model.params);
        assert_eq!(back.optimizer, state.optimizer);
        assert_eq!(back.running, state.running);
        assert_eq!(back.model.cfg, cfg);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_state(&path).unwrap_err().to_string().contains("magic"));
        let mut cfg = RunConfig::desk();
        cfg.encoder.layers = 1;
        save_state(&path, &TrainState::new(&cfg).unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_state(&path).unwrap_err().to_string().contains("truncated"));
    }
}
