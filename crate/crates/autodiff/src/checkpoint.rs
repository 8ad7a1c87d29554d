//! Binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//! magic `GCIW`, format version, tensor count, then per tensor the name
//! length, UTF-8 name, rank, dims, and raw little-endian `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GCIW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(path: &Path, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AutodiffError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(AutodiffError::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(AutodiffError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(AutodiffError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}
