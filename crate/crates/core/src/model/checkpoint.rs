//! Binary checkpoint: `CERM`, u32 version, u32-length config JSON, u32
//! tensor count, then per tensor a u32-length name, u32 rank, u32 dims and
//! little-endian f32 values. All integers are little-endian.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Float, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CERM";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint(format!(
            "truncated: wanted {n} bytes, got {}",
            buf.len()
        )));
    }
    Ok(buf)
}

pub fn write_checkpoint<T: Float>(w: &mut impl Write, model: &Model<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION as usize)?;
    let cfg = serde_json::to_vec(&model.config)?;
    put_u32(w, cfg.len())?;
    w.write_all(&cfg)?;
    put_u32(w, model.params.len())?;
    for (_, name, t) in model.params.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        for &x in t.data() {
            w.write_all(&(x.to_f64_lossy() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint; names and shapes must match its config exactly.
pub fn read_checkpoint<T: Float>(r: &mut impl Read) -> Result<Model<T>> {
    let magic = get_bytes(r, 4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = get_u32(r)?;
    let config: ModelConfig = serde_json::from_slice(&get_bytes(r, n)?)?;
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = get_u32(r)?;
        let name =
            String::from_utf8(get_bytes(r, n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = get_bytes(r, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        store.add(name, Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Model::from_params(config, store)
}

pub fn save_checkpoint<T: Float>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Model<T>> {
    read_checkpoint(&mut BufReader::new(std::fs::File::open(path)?))
}
