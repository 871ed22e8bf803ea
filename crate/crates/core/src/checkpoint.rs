//! Flat binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"LUCKPT01"
//! count      u32       number of entries
//! entry * count:
//!   name_len u32
//!   name     name_len bytes, UTF-8, dotted path (e.g. "enc2.lu0.m")
//!   rank     u32
//!   dims     rank * u64
//!   values   product(dims) * f64 (IEEE-754 binary64, row-major)
//! ```
//!
//! Entries are written in parameter-registration order. Values are always
//! stored as `f64`, so `f64` stores round-trip bit-exactly and `f32` stores
//! widen losslessly.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LUCKPT01";

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads every entry as `(name, tensor)`, preserving file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(dims, values)?));
    }
    Ok(out)
}

/// Overwrites store values from archive entries; names and shapes must match exactly.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, entries: &[(String, Tensor<f64>)]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "archive has {} entries, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        store
            .set_value(id, t.cast())
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    Ok(())
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::at_path(path, e))?);
    write_checkpoint(store, f)
}

pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::at_path(path, e))?);
    let entries = read_checkpoint(f)?;
    restore(store, &entries)
}
