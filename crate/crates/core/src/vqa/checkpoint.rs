//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"QECKPT01"
//! u32      digest length, then UTF-8 digest (canonical key=value config)
//! u32      parameter count
//! per parameter, in registration order:
//!   u32 name length, UTF-8 name
//!   u32 rank, rank x u64 extents
//!   product(extents) x f64 values
//! ```
//!
//! Identical model state always serializes to identical bytes.

use std::io::{Read, Write};

use super::{ModelConfig, VqaModel};
use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QECKPT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &VqaModel, store: &ParameterStore) -> Self {
        Self {
            digest: model.config().digest(),
            params: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model from the stored digest and loads every value.
    pub fn restore(&self) -> Result<(VqaModel, ParameterStore)> {
        let cfg = ModelConfig::from_digest(&self.digest)?;
        let (model, mut store) = VqaModel::new(cfg)?;
        if store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store.id(name)?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::shape("checkpoint", store.value(id).shape(), value.shape()));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok((model, store))
    }
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data("field too large for u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, ckpt.digest.len())?;
    w.write_all(ckpt.digest.as_bytes())?;
    put_u32(w, ckpt.params.len())?;
    for (name, t) in &ckpt.params {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(u32::from_le_bytes(get::<4>(r)?) as usize)
}

fn get_string(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)?;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Data("non-UTF-8 string in checkpoint".into()))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    if &get::<8>(r)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let digest = get_string(r)?;
    let count = get_u32(r)?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = get_string(r)?;
        let rank = get_u32(r)?;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(get::<8>(r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| Ok(f64::from_le_bytes(get::<8>(r)?)))
            .collect::<Result<Vec<_>>>()?;
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { digest, params })
}
