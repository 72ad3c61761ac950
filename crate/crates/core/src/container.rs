//! Shared on-disk layout: a one-line header, a UTF-8 JSON manifest, then a
//! little-endian binary blob.
//!
//! ```text
//! <MAGIC> <version> <manifest-bytes>\n
//! <manifest JSON>
//! <blob>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Location of one parameter tensor inside the blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub length: usize,
}

impl BlobRef {
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn push_f32(&mut self, shape: &[usize], values: impl IntoIterator<Item = f32>) -> BlobRef {
        let offset = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        let r = BlobRef {
            shape: shape.to_vec(),
            offset,
            length: self.bytes.len() - offset,
        };
        debug_assert_eq!(r.length, 4 * r.elements());
        r
    }

    pub fn push_i8(&mut self, shape: &[usize], values: &[i8]) -> BlobRef {
        let offset = self.bytes.len();
        self.bytes.extend(values.iter().map(|&v| v as u8));
        BlobRef {
            shape: shape.to_vec(),
            offset,
            length: values.len(),
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BlobReader { bytes }
    }

    fn region(&self, r: &BlobRef, width: usize) -> Result<&'a [u8]> {
        if r.length != width * r.elements() {
            return Err(Error::Manifest(format!(
                "tensor {:?} declares {} bytes, expected {}",
                r.shape,
                r.length,
                width * r.elements()
            )));
        }
        let end = r
            .offset
            .checked_add(r.length)
            .ok_or_else(|| Error::OutOfBounds("offset overflow".into()))?;
        if end > self.bytes.len() {
            return Err(Error::OutOfBounds(format!(
                "region {}..{end} exceeds blob of {} bytes",
                r.offset,
                self.bytes.len()
            )));
        }
        Ok(&self.bytes[r.offset..end])
    }

    pub fn f32s(&self, r: &BlobRef) -> Result<Vec<f32>> {
        Ok(self
            .region(r, 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub fn i8s(&self, r: &BlobRef) -> Result<Vec<i8>> {
        Ok(self.region(r, 1)?.iter().map(|&b| b as i8).collect())
    }

    /// Checks every region is in bounds and that no two regions overlap.
    pub fn check_layout<'r>(&self, refs: impl IntoIterator<Item = &'r BlobRef>) -> Result<()> {
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for r in refs {
            let end = r
                .offset
                .checked_add(r.length)
                .ok_or_else(|| Error::OutOfBounds("offset overflow".into()))?;
            if end > self.bytes.len() {
                return Err(Error::OutOfBounds(format!(
                    "region {}..{end} exceeds blob of {} bytes",
                    r.offset,
                    self.bytes.len()
                )));
            }
            spans.push((r.offset, end));
        }
        spans.sort_unstable();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(Error::Manifest(format!(
                    "overlapping regions {:?} and {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn encode<M: Serialize>(magic: &str, version: u32, manifest: &M, blob: &[u8]) -> Result<Vec<u8>> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Manifest(format!("cannot serialize manifest: {e}")))?;
    let mut out = format!("{magic} {version} {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(blob);
    Ok(out)
}

/// Splits a container into its parsed manifest and the blob bytes.
pub fn decode<'a, M: DeserializeOwned>(bytes: &'a [u8], magic: &str, version: u32) -> Result<(M, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Manifest("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Manifest("header is not UTF-8".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(magic) {
        return Err(Error::Manifest(format!("expected {magic} header")));
    }
    let found: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Manifest("unreadable version".into()))?;
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let len: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Manifest("unreadable manifest length".into()))?;
    let start = nl + 1;
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Manifest("manifest length exceeds file".into()))?;
    let manifest = serde_json::from_slice(&bytes[start..end])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    Ok((manifest, &bytes[end..]))
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip_and_version_check() {
        let bytes = encode("ZSQT", 1, &vec![1, 2, 3], &[9, 8]).unwrap();
        let (m, blob): (Vec<i32>, _) = decode(&bytes, "ZSQT", 1).unwrap();
        assert_eq!(m, vec![1, 2, 3]);
        assert_eq!(blob, &[9, 8]);
        assert!(matches!(
            decode::<Vec<i32>>(&bytes, "ZSQT", 2),
            Err(Error::Version { found: 1, expected: 2 })
        ));
        assert!(matches!(
            decode::<Vec<i32>>(&bytes, "ZSQM", 1),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn overlap_detected() {
        let blob = [0u8; 16];
        let r = BlobReader::new(&blob);
        let a = BlobRef { shape: vec![2], offset: 0, length: 8 };
        let b = BlobRef { shape: vec![2], offset: 4, length: 8 };
        assert!(matches!(r.check_layout([&a, &b]), Err(Error::Manifest(_))));
        let c = BlobRef { shape: vec![2], offset: 12, length: 8 };
        assert!(matches!(r.check_layout([&a, &c]), Err(Error::OutOfBounds(_))));
    }
}
