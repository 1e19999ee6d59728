//! Versioned, checksummed binary envelope shared by teacher caches and model
//! checkpoints: magic, version, kind, payload length, payload, SHA-256 of
//! everything preceding the digest. All integers and floats are little-endian
//! fixed-width, so round-trips are bit-exact.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FTID";
const VERSION: u16 = 1;

/// What an envelope carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    TeacherCache = 1,
    Checkpoint = 2,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(PayloadKind::TeacherCache),
            2 => Some(PayloadKind::Checkpoint),
            _ => None,
        }
    }
}

pub fn write_envelope(path: &Path, kind: PayloadKind, payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(payload.len() + 48);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind as u8);
    buf.push(0); // reserved
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_envelope(path: &Path, kind: PayloadKind) -> Result<Vec<u8>> {
    let buf = fs::read(path)?;
    let corrupt = |msg: &str| Error::CacheCorrupt(format!("{}: {msg}", path.display()));
    if buf.len() < 48 {
        return Err(corrupt("file shorter than envelope header"));
    }
    if &buf[0..4] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    match PayloadKind::from_byte(buf[6]) {
        Some(k) if k == kind => {}
        Some(_) => return Err(corrupt("wrong payload kind")),
        None => return Err(corrupt("unknown payload kind")),
    }
    let payload_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let expected_total = 16 + payload_len + 32;
    if buf.len() != expected_total {
        return Err(corrupt(&format!(
            "length {} != expected {expected_total} (truncated or padded)",
            buf.len()
        )));
    }
    let digest = Sha256::digest(&buf[..16 + payload_len]);
    if digest.as_slice() != &buf[16 + payload_len..] {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(buf[16..16 + payload_len].to_vec())
}

/// First 8 bytes of the SHA-256 of `bytes`, as a little-endian u64; used for
/// teacher-weight fingerprints.
pub fn fingerprint64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Little-endian byte writer for payloads.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
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

    pub fn f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian byte reader over a payload.
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8], context: &'a str) -> Self {
        PayloadReader { buf, pos: 0, context }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CacheCorrupt(format!(
                "{}: payload truncated at offset {}",
                self.context, self.pos
            )));
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

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::CacheCorrupt(format!(
                "{}: {} trailing payload bytes",
                self.context,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip_and_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let payload = vec![1u8, 2, 3, 4, 5];
        write_envelope(&path, PayloadKind::TeacherCache, &payload).unwrap();
        assert_eq!(
            read_envelope(&path, PayloadKind::TeacherCache).unwrap(),
            payload
        );
        // wrong kind
        assert!(read_envelope(&path, PayloadKind::Checkpoint).is_err());
        // truncation
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_envelope(&path, PayloadKind::TeacherCache),
            Err(Error::CacheCorrupt(_))
        ));
        // bit flip
        let mut flipped = bytes.clone();
        flipped[18] ^= 0x01;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(
            read_envelope(&path, PayloadKind::TeacherCache),
            Err(Error::CacheCorrupt(_))
        ));
    }
}
