//! Versioned binary containers.
//!
//! Layout: 4-byte magic, `u32` version, `u64` header length, a JSON header,
//! `u64` payload length, then the payload. All integers little-endian.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn encode<H: Serialize>(magic: &[u8; 4], version: u32, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header).map_err(|e| Error::Data(format!("header encoding: {e}")))?;
    let mut out = Vec::with_capacity(24 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub struct Decoded<H> {
    pub version: u32,
    pub header: H,
    pub payload: Vec<u8>,
}

pub fn decode<H: DeserializeOwned>(path: &Path, magic: &[u8; 4], bytes: &[u8]) -> Result<Decoded<H>> {
    let mut r = Reader::new(path, bytes);
    if r.take(4)? != magic {
        return Err(Error::format(path, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = r.u32()?;
    let header_len = r.u64()? as usize;
    let header_bytes = r.take(header_len)?;
    let header = serde_json::from_slice(header_bytes).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?.to_vec();
    if !r.is_empty() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(Decoded {
        version,
        header,
        payload,
    })
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 4], version: u32, header: &H, payload: &[u8]) -> Result<String> {
    let bytes = encode(magic, version, header, payload)?;
    write_atomic(path, &bytes)?;
    Ok(digest_bytes(&bytes))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<Decoded<H>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, magic, &bytes)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

pub fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a little-endian payload.
pub struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn path(&self) -> &Path {
        self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut payload = Vec::new();
        put_f64s(&mut payload, &[1.5, -2.25]);
        let bytes = encode(b"TEST", 3, &serde_json::json!({"a": 1}), &payload).unwrap();
        let path = Path::new("mem");
        let d: Decoded<serde_json::Value> = decode(path, b"TEST", &bytes).unwrap();
        assert_eq!(d.version, 3);
        assert_eq!(d.header["a"], 1);
        let mut r = Reader::new(path, &d.payload);
        assert_eq!(r.f64s(2).unwrap(), vec![1.5, -2.25]);
        assert!(r.is_empty());

        assert!(decode::<serde_json::Value>(path, b"NOPE", &bytes).is_err());
        assert!(decode::<serde_json::Value>(path, b"TEST", &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<serde_json::Value>(path, b"TEST", &extra).is_err());
    }
}
