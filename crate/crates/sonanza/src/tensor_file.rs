//! The `TNSR` binary tensor format.
//!
//! Layout, all little-endian: magic `TNSR`, `u32` version (1), `u8` dtype
//! (1 = f32, 2 = i32), `u32` rank, `rank` x `u64` dims, then the row-major
//! payload. Writes go through a temporary file and a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sonanza_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 4 + 4 + 1 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    I32 = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::I32 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::I32 { .. } => DType::I32,
        }
    }
}

/// Serializes a tensor. NaN payloads are rejected.
pub fn encode(t: &TensorData) -> Result<Vec<u8>> {
    let shape = t.shape();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(HEADER_FIXED + 8 * shape.len() + 4 * numel);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(t.dtype() as u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match t {
        TensorData::F32(t) => {
            if let Some(i) = t.data().iter().position(|v| v.is_nan()) {
                return Err(Error::Validation(format!("tensor holds NaN at flat index {i}")));
            }
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        TensorData::I32 { shape, data } => {
            if data.len() != numel {
                return Err(Error::Validation(format!(
                    "i32 tensor of shape {shape:?} holds {} values",
                    data.len()
                )));
            }
            data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            what: "tensor file",
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses `TNSR` bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorData> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let dtype = match r.take(1, "dtype")?[0] {
        1 => DType::F32,
        2 => DType::I32,
        other => return Err(r.fail(8, format!("unknown dtype {other}"))),
    };
    let rank = r.u32("rank")? as usize;
    if rank == 0 {
        return Err(r.fail(9, "rank must be positive"));
    }
    let mut shape = Vec::with_capacity(rank.min(64));
    let mut numel: usize = 1;
    for _ in 0..rank {
        let at = r.pos;
        let d = r.u64("dims")?;
        if d == 0 {
            return Err(r.fail(at, "zero-sized dimension"));
        }
        numel = usize::try_from(d)
            .ok()
            .and_then(|d| numel.checked_mul(d))
            .ok_or_else(|| r.fail(at, "dimension product overflows"))?;
        shape.push(d as usize);
    }
    let payload_len = numel.checked_mul(4).ok_or_else(|| r.fail(r.pos, "payload size overflows"))?;
    let start = r.pos;
    let payload = r.take(payload_len, "payload")?;
    let words = payload.chunks_exact(4).map(|c| c.try_into().unwrap());
    let out = match dtype {
        DType::F32 => {
            let data: Vec<f32> = words.map(f32::from_le_bytes).collect();
            TensorData::F32(Tensor::new(&shape, data)?)
        }
        DType::I32 => TensorData::I32 {
            shape,
            data: words.map(i32::from_le_bytes).collect(),
        },
    };
    if r.pos != bytes.len() {
        return Err(r.fail(start + payload_len, "trailing bytes after payload"));
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    tmp.set_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_tensor(path: &Path, t: &TensorData) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_tensor(path, &TensorData::F32(t.clone()))
}

pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    match read_tensor(path)? {
        TensorData::F32(t) => Ok(t),
        TensorData::I32 { .. } => Err(Error::Validation(format!("{}: expected f32 tensor, found i32", path.display()))),
    }
}

pub fn read_i32(path: &Path) -> Result<(Vec<usize>, Vec<i32>)> {
    match read_tensor(path)? {
        TensorData::I32 { shape, data } => Ok((shape, data)),
        TensorData::F32(_) => Err(Error::Validation(format!("{}: expected i32 tensor, found f32", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn two_by_three_is_53_bytes() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&TensorData::F32(t.clone())).unwrap();
        assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 2 * 8 + 24);
        assert_eq!(decode(&bytes, p()).unwrap(), TensorData::F32(t));
    }

    #[test]
    fn nan_is_rejected_at_write() {
        let t = Tensor::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(encode(&TensorData::F32(t)), Err(Error::Validation(_))));
    }

    #[test]
    fn corrupt_headers_report_offsets() {
        let t = TensorData::I32 {
            shape: vec![3],
            data: vec![1, -2, 3],
        };
        let good = encode(&t).unwrap();
        assert_eq!(decode(&good, p()).unwrap(), t);
        let offset = |bytes: &[u8]| match decode(bytes, p()) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected a format error, got {other:?}"),
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset(&bad), 0);
        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(offset(&bad), 4);
        let mut bad = good.clone();
        bad[8] = 7;
        assert_eq!(offset(&bad), 8);
        assert_eq!(offset(&good[..good.len() - 1]), 21);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset(&long), good.len() as u64);
    }
}
