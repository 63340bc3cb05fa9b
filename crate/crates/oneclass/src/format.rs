//! Versioned little-endian binary container used by checkpoints, template
//! sets, and standalone tensor dumps.
//!
//! Layout, byte for byte (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "OCDF"
//! version u32      currently 1
//! kind    u8       1 = checkpoint, 2 = template set, 3 = raw tensor
//! payload ...      kind-specific, built from the primitives below
//! ```
//!
//! Primitives: `u8`, `u32`, `u64`, `f64` (IEEE 754 bits), strings as
//! `u32 length + UTF-8`, tensors as `u8 rank + u32 dims + raw f64 data`.
//! Identical inputs serialize to identical bytes; tests pin round-trip
//! bit-exactness.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"OCDF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Checkpoint = 1,
    Templates = 2,
    Tensor = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Option<Kind> {
        match v {
            1 => Some(Kind::Checkpoint),
            2 => Some(Kind::Templates),
            3 => Some(Kind::Tensor),
            _ => None,
        }
    }
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: Kind) -> Writer {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind as u8);
        Writer { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    /// Shape header plus raw payload.
    pub fn tensor(&mut self, shape: &[usize], data: &[f64]) {
        self.u8(shape.len() as u8);
        for &d in shape {
            self.u32(d as u32);
        }
        self.f64_slice(data);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validate magic, version and kind, then position at the payload.
    pub fn open(buf: &'a [u8], kind: Kind) -> Result<Reader<'a>> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.bytes(4)?;
        if magic != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let found = r.u8()?;
        match Kind::from_u8(found) {
            Some(k) if k == kind => Ok(r),
            Some(k) => Err(Error::Corrupt(format!(
                "expected a {kind:?} file, found {k:?}"
            ))),
            None => Err(Error::Corrupt(format!("unknown container kind {found}"))),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("unexpected end of file".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.bytes(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Corrupt("invalid UTF-8".into()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.bytes(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn tensor_parts(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let len = shape.iter().product::<usize>();
        let data = self.f64_vec(len)?;
        Ok((shape, data))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Corrupt("trailing bytes after payload".into()))
        }
    }
}

/// Write one tensor as a standalone raw container file.
pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut w = Writer::new(Kind::Tensor);
    w.tensor(t.shape(), t.data());
    std::fs::write(path, w.finish()).map_err(|e| Error::io(path, e))
}

/// Read a standalone raw tensor container.
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::open(&bytes, Kind::Tensor)?;
    let (shape, data) = r.tensor_parts()?;
    r.expect_end()?;
    Tensor::new(data, &shape)
}

/// FNV-1a over a byte stream; used for model identity hashes.
#[derive(Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Fnv1a {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}
