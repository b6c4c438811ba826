//! Minimal little-endian binary serialization for weight files and
//! checkpoints. Exact f64 round-trips; explicit magic and version fields.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32) -> Writer {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    pub fn string(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u64(t.h as u64);
        self.u64(t.w as u64);
        self.u64(t.c as u64);
        self.f64_slice(&t.data);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    pub fn open(path: &Path, magic: &[u8; 8], expect_version: u32) -> Result<Reader> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        let mut r = Reader { buf, pos: 0 };
        let got_magic = r.take(8)?.to_vec();
        if got_magic != magic {
            return Err(Error::Checkpoint(format!(
                "{}: wrong file magic",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != expect_version {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} (expected {})",
                path.display(),
                version,
                expect_version
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?).map_err(|_| Error::Checkpoint("invalid utf8".into()))
    }

    pub fn f64_slice(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let h = self.u64()? as usize;
        let w = self.u64()? as usize;
        let c = self.u64()? as usize;
        let data = self.f64_slice()?;
        if data.len() != h * w * c {
            return Err(Error::Checkpoint("tensor length mismatch".into()));
        }
        Ok(Tensor::from_vec(h, w, c, data))
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// FNV-1a over a canonical string; used to fingerprint configs embedded in
/// weight files.
pub fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let t = Tensor::from_vec(2, 1, 3, vec![0.1, -2.5, 3e-17, f64::MAX, 1.0, -0.0]);
        let mut w = Writer::new(b"NTRETEST", 3);
        w.string("hello");
        w.tensor(&t);
        w.u128(42);
        w.save(&path).unwrap();

        let mut r = Reader::open(&path, b"NTRETEST", 3).unwrap();
        assert_eq!(r.string().unwrap(), "hello");
        let t2 = r.tensor().unwrap();
        assert_eq!(t.data, t2.data);
        assert_eq!(r.u128().unwrap(), 42);
        assert!(r.done());
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        Writer::new(b"NTRETEST", 3).save(&path).unwrap();
        assert!(Reader::open(&path, b"NTRETEST", 4).is_err());
        assert!(Reader::open(&path, b"NTREXXXX", 3).is_err());
    }
}
