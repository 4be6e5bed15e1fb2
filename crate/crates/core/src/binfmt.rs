//! Shared binary framing for the on-disk formats.
//!
//! Every file is `magic (4 bytes) || payload || crc32(payload) (u32 LE)`.
//! The payload starts with a `u16` little-endian format version. Integers are
//! little-endian throughout; floating-point values are stored as `f32` LE.

use crate::error::{Error, Result};

/// CRC32 (IEEE 802.3, reflected, polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    const POLY: u32 = 0xEDB8_8320;
    let mut table = [0u32; 256];
    let mut i = 0usize;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Accumulates a payload, then frames it with magic and trailing CRC.
pub struct Writer {
    payload: Vec<u8>,
}

impl Writer {
    pub fn new(version: u16) -> Self {
        let mut w = Writer { payload: Vec::new() };
        w.u16(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.payload.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.payload.extend_from_slice(&v.to_le_bytes());
    }
    /// Writes a slice of f64 values as f32 LE.
    pub fn f32_slice(&mut self, vs: &[f64]) {
        self.payload.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v as f32);
        }
    }
    pub fn bytes(&mut self, bs: &[u8]) {
        self.payload.extend_from_slice(bs);
    }

    /// Finishes the frame: magic, payload, CRC32 of the payload.
    pub fn finish(self, magic: &[u8; 4]) -> Vec<u8> {
        let crc = crc32(&self.payload);
        let mut out = Vec::with_capacity(4 + self.payload.len() + 4);
        out.extend_from_slice(magic);
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }
}

/// Cursor over a verified payload.
pub struct Reader<'a> {
    payload: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and CRC, verifies the version, and returns a payload
    /// cursor positioned after the version field.
    pub fn open(
        bytes: &'a [u8],
        magic: &[u8; 4],
        expect_version: u16,
        what: &'static str,
    ) -> Result<Self> {
        if bytes.len() < 10 {
            return Err(Error::Format(format!("{what}: file truncated")));
        }
        if &bytes[..4] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic {:02x?}, expected {:?}",
                &bytes[..4],
                String::from_utf8_lossy(magic)
            )));
        }
        let payload = &bytes[4..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let actual = crc32(payload);
        if stored != actual {
            return Err(Error::Format(format!(
                "{what}: CRC mismatch (stored {stored:08x}, computed {actual:08x})"
            )));
        }
        let mut r = Reader { payload, pos: 0, what };
        let version = r.u16()?;
        if version != expect_version {
            return Err(Error::Format(format!(
                "{what}: unsupported format version {version} (expected {expect_version})"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.payload.len() {
            return Err(Error::Format(format!("{}: file truncated", self.what)));
        }
        let s = &self.payload[self.pos..self.pos + n];
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
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    /// Reads `n` f32 values, widening to f64.
    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    /// Errors unless the payload is fully consumed.
    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.payload.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.payload.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_check_value() {
        // Standard check value for CRC-32/ISO-HDLC.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn frame_roundtrip() {
        let mut w = Writer::new(1);
        w.u8(7);
        w.u32(0xDEAD_BEEF);
        w.f32_slice(&[1.5, -2.0]);
        let bytes = w.finish(b"TEST");

        let mut r = Reader::open(&bytes, b"TEST", 1, "test").unwrap();
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0xDEAD_BEEF);
        assert_eq!(r.f32_vec(2).unwrap(), vec![1.5, -2.0]);
        r.expect_end().unwrap();
    }

    #[test]
    fn corrupted_frames_are_rejected() {
        let mut w = Writer::new(1);
        w.u64(42);
        let bytes = w.finish(b"TEST");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Reader::open(&bad_magic, b"TEST", 1, "t"),
            Err(Error::Format(_))
        ));

        let mut flipped = bytes.clone();
        flipped[6] ^= 0x01;
        assert!(matches!(
            Reader::open(&flipped, b"TEST", 1, "t"),
            Err(Error::Format(_))
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Reader::open(truncated, b"TEST", 1, "t"),
            Err(Error::Format(_))
        ));

        assert!(matches!(
            Reader::open(&bytes, b"TEST", 2, "t"),
            Err(Error::Format(_))
        ));
    }
}
