//! Little-endian record encoding with a SHA-256 trailer.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.len_u32(v.len());
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u16(u16::try_from(s.len()).expect("name fits in u16"));
        self.bytes(s.as_bytes());
    }

    /// Appends the digest of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    /// Verifies the trailer and returns a reader over the body.
    pub fn open(data: &'a [u8], path: &'a Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        if data.len() < 8 + DIGEST_LEN {
            return Err(Error::format(path, Some(0), "file too short"));
        }
        let (body, digest) = data.split_at(data.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::format(path, None, "checksum mismatch (file corrupted)"));
        }
        let mut r = Self { buf: body, pos: 0, path };
        if r.take(4)? != magic {
            return Err(Error::format(path, Some(0), format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let v = r.u32()?;
        if v != version {
            return Err(Error::format(path, Some(4), format!("unsupported version {v}, expected {version}")));
        }
        Ok(r)
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, Some(self.pos as u64), msg)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.err(format!("array of {n} floats exceeds the remaining bytes")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}
