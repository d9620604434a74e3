//! On-disk container shared by dataset splits and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   b"MMDS" (dataset) or b"MMCK" (checkpoint)
//! version    u32       CONTAINER_VERSION
//! header_len u32
//! header     header_len bytes of UTF-8 JSON
//! payload    remaining bytes, format given by the header's "schema"
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u32 = 1;
pub const DATASET_MAGIC: [u8; 4] = *b"MMDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write(path: &Path, magic: [u8; 4], header: &Value, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    let head = serde_json::to_vec(header)?;
    w.write_all(&magic)?;
    w.write_u32::<LittleEndian>(CONTAINER_VERSION)?;
    w.write_u32::<LittleEndian>(head.len() as u32)?;
    w.write_all(&head)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path, magic: [u8; 4]) -> Result<(Value, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 4];
    r.read_exact(&mut m)
        .map_err(|_| malformed(path, "truncated magic"))?;
    if m != magic {
        return Err(malformed(path, format!("bad magic {m:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CONTAINER_VERSION {
        return Err(malformed(
            path,
            format!("unsupported container version {version}"),
        ));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut head = vec![0u8; len];
    r.read_exact(&mut head)
        .map_err(|_| malformed(path, "truncated header"))?;
    let header: Value = serde_json::from_slice(&head)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

pub(crate) fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.reserve(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a payload that reports truncation as a format error.
pub(crate) struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn new(data: &'a [u8], path: &'a Path) -> Self {
        Self { data, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(malformed(self.path, "payload truncated"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(malformed(self.path, "trailing bytes after payload"))
        }
    }
}

pub(crate) fn malformed_header(path: &Path, reason: impl Into<String>) -> Error {
    malformed(path, reason)
}
