//! Self-describing binary container used for passports, watermark keys and
//! checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  "PSPTCNTR"
//! 8       4     version (u32 LE, currently 1)
//! 12      1     kind (1 passports, 2 checkpoint, 3 watermark key)
//! 13      3     reserved, zero
//! 16      32    model fingerprint, ASCII hex, NUL padded
//! 48      32    SHA-256 of the body
//! 80      8     body length (u64 LE)
//! 88      ...   body
//! ```
//!
//! The body is a UTF-8 JSON metadata block (`u32` length prefix) followed by
//! a `u32` array count and that many named arrays, each stored as
//! `u16 name length, name, u8 rank, rank x u32 dims, f32 LE values`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"PSPTCNTR";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 88;
const FINGERPRINT_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Passports = 1,
    Checkpoint = 2,
    WatermarkKey = 3,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Self::Passports),
            2 => Ok(Self::Checkpoint),
            3 => Ok(Self::WatermarkKey),
            other => Err(Error::Format(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub fingerprint: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of body".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Container {
    pub fn new(kind: ContainerKind, fingerprint: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind, fingerprint: fingerprint.into(), meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.fingerprint.len() > FINGERPRINT_LEN || !self.fingerprint.is_ascii() {
            return Err(Error::Format("fingerprint must be at most 32 ASCII bytes".into()));
        }
        let mut body = Vec::new();
        let meta = serde_json::to_vec(&self.meta)?;
        body.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        body.extend_from_slice(&meta);
        body.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("array `{name}` cannot be encoded")));
            }
            body.extend_from_slice(&(name.len() as u16).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(t.shape.len() as u8);
            for &d in &t.shape {
                body.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&[0; 3]);
        let mut fp = [0u8; FINGERPRINT_LEN];
        fp[..self.fingerprint.len()].copy_from_slice(self.fingerprint.as_bytes());
        out.extend_from_slice(&fp);
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("file shorter than header".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = ContainerKind::from_byte(bytes[12])?;
        if bytes[13..16] != [0; 3] {
            return Err(Error::Format("reserved header bytes are not zero".into()));
        }
        let fp_raw = &bytes[16..48];
        let fp_end = fp_raw.iter().position(|&b| b == 0).unwrap_or(FINGERPRINT_LEN);
        let fingerprint = std::str::from_utf8(&fp_raw[..fp_end])
            .map_err(|_| Error::Format("fingerprint is not ASCII".into()))?
            .to_string();
        let checksum = &bytes[48..80];
        let body_len = u64::from_le_bytes(bytes[80..88].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != body_len {
            return Err(Error::Format(format!("body is {} bytes, header says {body_len}", body.len())));
        }
        if Sha256::digest(body).as_slice() != checksum {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            arrays.push((name, Tensor { shape, data }));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Self { kind, fingerprint, meta, arrays })
    }

    /// Writes via a temporary sibling and a rename so readers never observe
    /// a half-written file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{}.tmp{}",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("container"),
            std::process::id()
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_kind(self, kind: ContainerKind) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} container, found {:?}", self.kind)));
        }
        Ok(self)
    }
}
