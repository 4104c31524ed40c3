//! Little-endian helpers shared by the model and tree file formats.

use crate::error::{FepllError, Result};

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            FepllError::Format(format!("truncated file: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FepllError::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(FepllError::Format(format!("{} trailing bytes after payload", self.buf.len() - self.pos)))
        }
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Checks an 8-byte magic of the form `<7-byte tag><version digit>`.
pub(crate) fn check_magic(r: &mut ByteReader<'_>, expected: &[u8; 8]) -> Result<()> {
    let got = r.take(8).map_err(|_| FepllError::Format("file too short for magic".into()))?;
    if got[..7] != expected[..7] {
        return Err(FepllError::Format(format!("bad magic {:?}", String::from_utf8_lossy(got))));
    }
    if got[7] != expected[7] {
        return Err(FepllError::Format(format!(
            "version mismatch: file has {:?}, reader supports {:?}",
            got[7] as char, expected[7] as char
        )));
    }
    Ok(())
}
