//! Binary tensor and checkpoint containers.
//!
//! Tensor record: magic `TABV1`, `u8` rank, `rank` little-endian `u32` dims,
//! then the little-endian `f32` payload in row-major order.
//!
//! Checkpoint: magic `TACKPT1`, `u32` metadata length + UTF-8 metadata,
//! `u32` entry count, then per entry a `u32` name length, the UTF-8 name and
//! one tensor record. Entries are written in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 5] = b"TABV1";
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"TACKPT1";

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => NnError::Format(format!("truncated {}", what)),
        _ => NnError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| NnError::Format(format!("rank {} exceeds 255", t.rank())))?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| NnError::Format(format!("dim {} exceeds u32", d)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic = read_exact(r, TENSOR_MAGIC.len(), "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(NnError::Format("bad tensor magic".into()));
    }
    let rank = read_exact(r, 1, "tensor rank")?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "tensor dims")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NnError::Format("tensor size overflow".into()))?;
    let bytes = read_exact(r, n * 4, "tensor payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NnError::Format("trailing bytes after tensor".into()));
    }
    Ok(t)
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, metadata: impl Into<String>) -> Self {
        Self {
            metadata: metadata.into(),
            tensors: store.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.metadata.len() as u32).to_le_bytes())?;
        w.write_all(self.metadata.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic = read_exact(r, CHECKPOINT_MAGIC.len(), "checkpoint magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(NnError::Format("bad checkpoint magic".into()));
        }
        let mlen = read_u32(r, "metadata length")? as usize;
        let metadata = String::from_utf8(read_exact(r, mlen, "metadata")?)
            .map_err(|_| NnError::Format("metadata is not UTF-8".into()))?;
        let count = read_u32(r, "entry count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = read_u32(r, "name length")? as usize;
            let name = String::from_utf8(read_exact(r, nlen, "name")?)
                .map_err(|_| NnError::Format("parameter name is not UTF-8".into()))?;
            tensors.push((name, read_tensor(r)?));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Store holding exactly the checkpoint tensors.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (k, v) in &self.tensors {
            store.insert(k.clone(), v.clone())?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_record_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..5], b"TABV1");
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &1u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&buf[18..22], &(-0.5f32).to_le_bytes());
        assert_eq!(buf.len(), 22);
        assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_tensor_is_a_format_error() {
        let t = Tensor::zeros(vec![3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(NnError::Format(_))));
    }
}
