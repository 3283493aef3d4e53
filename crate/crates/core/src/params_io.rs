//! Flat little-endian parameter files.
//!
//! Layout:
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `PFRP`                           |
//! | 4     | format version (u32, currently 1)      |
//! | 4     | kind (u32: 1 predictor, 2 monitor, 3 policy) |
//! | 4     | number of dims `n` (u32)               |
//! | 4n    | dims (u32 each)                        |
//! | 8     | number of values `m` (u64)             |
//! | 8m    | values (f64 each)                      |

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFRP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Predictor = 1,
    Monitor = 2,
    Policy = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub kind: Kind,
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl Blob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.dims.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = match cur.u32()? {
            1 => Kind::Predictor,
            2 => Kind::Monitor,
            3 => Kind::Policy,
            k => return Err(Error::Format(format!("unknown kind {k}"))),
        };
        let nd = cur.u32()? as usize;
        let dims = (0..nd).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let nv = cur.u64()? as usize;
        if bytes.len() - cur.at != nv * 8 {
            return Err(Error::Format(format!(
                "expected {nv} values, found {} trailing bytes",
                bytes.len() - cur.at
            )));
        }
        let values = (0..nv)
            .map(|_| cur.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Blob { kind, dims, values })
    }

    pub fn expect_kind(self, kind: Kind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected {kind:?} parameters, found {:?}", self.kind)));
        }
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
