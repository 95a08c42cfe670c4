//! Checkpoint container: a named tensor table in a fixed little-endian
//! binary layout.
//!
//! Layout: magic `KBRN`, u32 version (= 1), u32 tensor count; per tensor a
//! u16 name length, the UTF-8 name, u8 ndim, ndim u32 dims, then the
//! row-major IEEE-754 little-endian f32 values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{with_context, CliError, Result};

pub const MAGIC: [u8; 4] = *b"KBRN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> TensorRecord {
        TensorRecord { name: name.into(), dims, data }
    }

    /// Convenience for scalar metadata entries.
    pub fn scalar(name: impl Into<String>, value: f32) -> TensorRecord {
        TensorRecord { name: name.into(), dims: vec![1], data: vec![value] }
    }

    pub fn count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn save(path: &Path, records: &[TensorRecord]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CliError::Runtime(format!("tensor name too long: {}", r.name)));
        }
        if r.count() != r.data.len() {
            return Err(CliError::Runtime(format!(
                "tensor {}: dims {:?} do not match {} values",
                r.name,
                r.dims,
                r.data.len()
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(r.dims.len() as u8);
        for &d in &r.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f =
        fs::File::create(path).map_err(with_context(&format!("creating {}", path.display())))?;
    f.write_all(&buf).map_err(with_context(&format!("writing {}", path.display())))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CliError::Runtime(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load(path: &Path) -> Result<Vec<TensorRecord>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(with_context(&format!("opening {}", path.display())))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: path.display().to_string() };
    if r.take(4)? != MAGIC {
        return Err(CliError::Runtime(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Runtime(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CliError::Runtime(format!("{}: bad tensor name", path.display())))?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()?);
        }
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(CliError::Runtime(format!(
            "{}: {} trailing bytes after tensor table",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kbrn");
        let records = vec![
            TensorRecord::new("a/w", vec![2, 1, 1, 3], vec![1.5, -2.25, 0.0, 3.5, 4.0, -0.125]),
            TensorRecord::scalar("meta/x", 7.0),
        ];
        save(&path, &records).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn corrupt_magic_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.kbrn");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn wrong_version_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.kbrn");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn header_layout_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kbrn");
        save(&path, &[TensorRecord::new("ab", vec![2], vec![1.0, 2.0])]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"KBRN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &2u16.to_le_bytes());
        assert_eq!(&bytes[14..16], b"ab");
        assert_eq!(bytes[16], 1); // ndim
        assert_eq!(&bytes[17..21], &2u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[25..29], &2.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 29);
    }
}
