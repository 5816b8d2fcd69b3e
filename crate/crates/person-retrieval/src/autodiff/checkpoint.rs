//! Parameter checkpoints: a flat binary file of named tensors plus a text
//! manifest of names and shapes.
//!
//! Binary layout (all integers little-endian u32, floats little-endian f64):
//!
//! ```text
//! magic "NTCK0001"
//! meta_len, meta (UTF-8, e.g. the training config as JSON)
//! tensor_count
//! per tensor: name_len, name, ndim, dims..., row-major f64 data
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"NTCK0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// An ordered list of named tensors plus free-form metadata.
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_checkpoint(
    path: &Path,
    named: &[(&str, &Tensor)],
    meta: &str,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, tensor) in named {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the companion text manifest: one `name dim0xdim1x...` line per tensor.
pub fn write_manifest(path: &Path, named: &[(&str, &Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, tensor) in named {
        let dims: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
        writeln!(w, "{} {}", name, dims.join("x"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta = String::from_utf8(meta_bytes)
        .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::from_vec(data, shape, true)
            .map_err(|e| CheckpointError::Corrupt(format!("tensor {name}: {e}")))?;
        tensors.push((name, tensor));
    }
    Ok(Checkpoint { meta, tensors })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
