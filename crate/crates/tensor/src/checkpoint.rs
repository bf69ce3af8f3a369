//! Versioned binary checkpoint: named parameter tensors, a free-form
//! metadata string (JSON by convention), and optional optimizer state.
//!
//! Layout (little endian):
//! `magic[8] version:u32 meta_len:u32 meta n:u32 {name_len:u16 name ndim:u8
//! dims:u32* data:f32*}* has_opt:u8 [step:u64 skipped:u64 {m:f32* v:f32*}*]`

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CDZCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: String,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

pub fn encode(meta: &str, params: &ParamStore, optimizer: Option<&OptimizerState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match optimizer {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            out.extend_from_slice(&state.skipped.to_le_bytes());
            for (m, v) in state.first_moment.iter().zip(&state.second_moment) {
                for x in m.iter().chain(v) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(TensorError::Checkpoint(format!(
                "truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| TensorError::Checkpoint(format!("invalid utf-8: {e}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = c.u32()? as usize;
    let meta = c.string(meta_len)?;
    let n = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = c.u16()? as usize;
        let name = c.string(name_len)?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = c.f32s(numel)?;
        params.add(name, Tensor::new(shape, data)?)?;
    }
    let optimizer = match c.u8()? {
        0 => None,
        1 => {
            let step = c.u64()?;
            let skipped = c.u64()?;
            let mut first_moment = Vec::with_capacity(n);
            let mut second_moment = Vec::with_capacity(n);
            for p in params.iter() {
                first_moment.push(c.f32s(p.value.numel())?);
                second_moment.push(c.f32s(p.value.numel())?);
            }
            Some(OptimizerState {
                step,
                first_moment,
                second_moment,
                skipped,
            })
        }
        other => {
            return Err(TensorError::Checkpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    if c.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

pub fn save(
    path: &Path,
    meta: &str,
    params: &ParamStore,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(meta, params, optimizer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_with_optimizer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.add_normal("w", &[3, 4], 0.1, &mut rng).unwrap();
        store.add_zeros("b", &[4]).unwrap();
        let mut opt = OptimizerState::for_store(&store);
        opt.step = 7;
        opt.first_moment[0][2] = 0.25;
        let bytes = encode("{\"k\":1}", &store, Some(&opt));
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.meta, "{\"k\":1}");
        assert_eq!(ck.optimizer.as_ref(), Some(&opt));
        for (a, b) in ck.params.iter().zip(store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn truncation_detected() {
        let mut store = ParamStore::new();
        store.add_zeros("b", &[4]).unwrap();
        let bytes = encode("", &store, None);
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
        assert!(decode(b"nonsense").is_err());
    }
}
