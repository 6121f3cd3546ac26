//! `AFL1` tensor container shared by base models, adapters and routers.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      b"AFL1"
//! version    u32            (currently 1)
//! kind       u32            0 base model, 1 adapter, 2 router, 3 dense update
//! ndims      u32, dims      u64 × ndims
//! nscalars   u32, scalars   f64 × nscalars
//! fingerprint u64           base-model fingerprint
//! ntensors   u32
//! per tensor: name_len u32, name (utf-8), rows u32, cols u32, data f64 × rows·cols
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"AFL1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    BaseModel = 0,
    Adapter = 1,
    Router = 2,
    DenseDelta = 3,
}

impl FileKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::BaseModel),
            1 => Some(Self::Adapter),
            2 => Some(Self::Router),
            3 => Some(Self::DenseDelta),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: FileKind,
    pub dims: Vec<u64>,
    pub scalars: Vec<f64>,
    pub fingerprint: u64,
    pub tensors: Vec<(String, Matrix)>,
}

impl TensorFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for s in &self.scalars {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let kind_raw = r.u32()?;
        let kind = FileKind::from_u32(kind_raw)
            .ok_or_else(|| Error::Invalid(format!("unknown file kind {kind_raw}")))?;
        let ndims = r.u32()? as usize;
        let dims = (0..ndims).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let nscalars = r.u32()? as usize;
        let scalars = (0..nscalars).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let fingerprint = r.u64()?;
        let ntensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(ntensors.min(1024));
        for _ in 0..ntensors {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Invalid("tensor name is not utf-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Truncated(path.to_path_buf()))?;
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Truncated(path.to_path_buf()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Invalid(format!(
                "{} trailing bytes in {}",
                bytes.len() - r.pos,
                path.display()
            )));
        }
        Ok(Self {
            kind,
            dims,
            scalars,
            fingerprint,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingFile(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: FileKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Invalid(format!(
                "expected {kind:?} file, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Invalid(format!("missing tensor `{name}`")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(self.path.to_path_buf()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
