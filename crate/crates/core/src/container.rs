//! Little-endian binary container primitives shared by every artifact format.
//!
//! Each file starts with an 8-byte ASCII magic and a `u32` version. Readers
//! validate both and fail on truncation or trailing bytes, so a corrupt file
//! never yields a partial value.

use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.f64(v);
        }
    }

    /// Rank, dims, then the values as `f64`.
    pub fn shaped_f64(&mut self, shape: &[usize], values: impl IntoIterator<Item = f64>) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        self.f64s(values);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf)?;
        Ok(())
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and version.
    pub fn new(buf: &'a [u8], magic: &[u8; 8], what: &'static str) -> Result<Self> {
        if buf.len() < 12 {
            return Err(Error::Format(format!("{what}: file too short ({} bytes)", buf.len())));
        }
        if &buf[..8] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Reader { buf, pos: 8, what };
        let v = r.u32()?;
        if v != VERSION {
            return Err(Error::Format(format!("{what}: unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (need {n} more)",
                self.what, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{}: count {v} too large", self.what)))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.what)))
    }

    /// Reads `n` values, checking first that enough bytes remain.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.too_large())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn shaped_f64(&mut self) -> Result<(Vec<usize>, Vec<f64>)> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("{}: implausible rank {rank}", self.what)));
        }
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| self.too_large())?;
        Ok((shape, self.f64s(n)?))
    }

    fn too_large(&self) -> Error {
        Error::Format(format!("{}: payload size overflows", self.what))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_primitives() {
        let mut w = Writer::new(b"TESTMAGC");
        w.u16(7);
        w.str("héllo");
        w.shaped_f64(&[2, 1], [1.5, -0.0]);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes, b"TESTMAGC", "test").unwrap();
        assert_eq!(r.u16().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "héllo");
        let (s, v) = r.shaped_f64().unwrap();
        assert_eq!(s, vec![2, 1]);
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        r.finish().unwrap();
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing() {
        let mut w = Writer::new(b"TESTMAGC");
        w.u64(1);
        let bytes = w.into_bytes();
        assert!(Reader::new(&bytes, b"OTHERMAG", "test").is_err());
        let mut r = Reader::new(&bytes[..bytes.len() - 1], b"TESTMAGC", "test").unwrap();
        assert!(r.u64().is_err());
        let r = Reader::new(&bytes, b"TESTMAGC", "test").unwrap();
        assert!(r.finish().is_err());
    }
}
