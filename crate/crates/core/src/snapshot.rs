//! Binary container shared by posterior and generator snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "BCLS"
//! version u32      currently 1
//! kind    u8       1 = posterior, 2 = generator set
//! payload ...      kind-specific, built from the primitives below
//! ```
//!
//! Payload primitives: `u64`, `f64` (IEEE-754 bits), strings as `u64` length
//! plus UTF-8 bytes, tensors as `u64` rank, `u64` dims, then the row-major
//! values. Floats are stored bit-exactly so a restored posterior reproduces
//! predictions exactly.

use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BCLS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    Posterior = 1,
    Generators = 2,
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(kind: Kind) -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(kind as u8);
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.usize(t.shape().len());
        for &d in t.shape() {
            self.usize(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Validates the header and checks the container kind.
    pub fn new(buf: &'a [u8], expected: Kind) -> Result<Self> {
        if buf.len() < 9 || &buf[..4] != MAGIC {
            return Err(Error::Format("not a snapshot container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        if buf[8] != expected as u8 {
            return Err(Error::Format(format!(
                "snapshot kind {} where {:?} was expected",
                buf[8], expected
            )));
        }
        Ok(Self { buf, pos: 9 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize()?);
        }
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Format("snapshot truncated".into()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(Tensor::new(shape, data)?)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after snapshot payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Writes `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let mut enc = Encoder::new(Kind::Posterior);
        enc.f64(-0.0);
        enc.str("abc");
        let bytes = enc.finish();
        assert!(Decoder::new(&bytes, Kind::Generators).is_err());
        let mut dec = Decoder::new(&bytes, Kind::Posterior).unwrap();
        assert_eq!(dec.f64().unwrap().to_bits(), (-0.0f64).to_bits());
        assert_eq!(dec.str().unwrap(), "abc");
        dec.finish().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Decoder::new(&bad, Kind::Posterior).is_err());
        let mut dec = Decoder::new(&bytes[..12], Kind::Posterior).unwrap();
        assert!(dec.f64().is_err());
    }
}
