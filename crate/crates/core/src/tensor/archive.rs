//! Binary storage for matrices.
//!
//! Single matrix (`.fmat`):
//! `b"FMAT" | dtype:u8 | rows:u32 | cols:u32 | rows*cols little-endian values`.
//!
//! Archive (`.ckpt`):
//! `b"FCIRARC1" | meta_len:u32 | meta (UTF-8 JSON) | count:u32 | entries`, where
//! each entry is `name_len:u16 | name | dtype:u8 | rows:u32 | cols:u32 | values`.
//! All integers are little-endian. The only dtype is `1` = f64.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::graph::Mat;
use crate::error::{Error, Result};
use crate::util::atomic_write;

const MAT_MAGIC: &[u8; 4] = b"FMAT";
const ARC_MAGIC: &[u8; 8] = b"FCIRARC1";
const DTYPE_F64: u8 = 1;

fn put_matrix(out: &mut Vec<u8>, m: &Mat) {
    out.push(DTYPE_F64);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn err(&self, msg: &str) -> Error {
        Error::Archive {
            path: self.path.to_path_buf(),
            msg: format!("{msg} at byte {}", self.pos),
        }
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

    fn matrix(&mut self) -> Result<Mat> {
        if self.u8()? != DTYPE_F64 {
            return Err(self.err("unsupported dtype"));
        }
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"))
    }
}

pub fn encode_matrix(m: &Mat) -> Vec<u8> {
    let mut out = MAT_MAGIC.to_vec();
    put_matrix(&mut out, m);
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Mat> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAT_MAGIC {
        return Err(r.err("bad magic"));
    }
    let m = r.matrix()?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &Mat) -> Result<()> {
    atomic_write(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<Mat> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

/// Named matrices plus a JSON metadata blob.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, Mat)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = ARC_MAGIC.to_vec();
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.write_all(&meta).unwrap();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_matrix(&mut out, m);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != ARC_MAGIC {
            return Err(r.err("bad magic"));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.err("non-UTF-8 name"))?
                .to_string();
            entries.push((name, r.matrix()?));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}
