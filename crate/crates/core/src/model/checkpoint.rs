//! Binary parameter checkpoints.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! b"DFQA"  u32 version  u64 config hash  u32 parameter count
//! per parameter:
//!   u32 name length, UTF-8 name
//!   u32 rank, u64 extent × rank
//!   f64 × product(extents)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFQA";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, config_hash: u64, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&config_hash.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &e in p.value.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parameters stored in a checkpoint, in file order, plus its config hash.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(u64, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hash = read_u64(&mut input)?;
    let count = read_u32(&mut input)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut input).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        let mut b = [0u8; 8];
        for v in &mut data {
            input.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok((hash, params))
}

/// Loads a checkpoint into `store`, which must hold exactly the same
/// parameter names and shapes and was built from a config with hash
/// `config_hash`.
pub fn load_checkpoint<R: Read>(store: &mut ParamStore, config_hash: u64, input: R) -> Result<()> {
    let (hash, params) = read_checkpoint(input)?;
    if hash != config_hash {
        return Err(Error::Format(format!(
            "checkpoint was written for config {hash:016x}, model has {config_hash:016x}"
        )));
    }
    if params.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, value) in params {
        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}` in checkpoint")))?;
        if store.value(id).shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?} in checkpoint, {:?} in model",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = value;
    }
    Ok(())
}
