//! On-disk container shared by float checkpoints and quantized models:
//! one magic line, one line of JSON manifest, then a little-endian blob.
//!
//! The manifest lists every array (name, element type, shape, byte offset,
//! byte length) and carries a CRC-32 of the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F32,
    I8,
    I32,
}

impl ElemType {
    fn size(self) -> usize {
        match self {
            ElemType::F32 | ElemType::I32 => 4,
            ElemType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: ElemType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    #[serde(flatten)]
    manifest: M,
    tensors: Vec<BlobEntry>,
    blob_bytes: usize,
    crc32: String,
}

#[derive(Default)]
pub struct BlobWriter {
    entries: Vec<BlobEntry>,
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push_bytes(&mut self, name: &str, dtype: ElemType, shape: &[usize], bytes: impl Iterator<Item = u8>) {
        let offset = self.blob.len();
        self.blob.extend(bytes);
        self.entries.push(BlobEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset,
            bytes: self.blob.len() - offset,
        });
    }

    pub fn f32s(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.push_bytes(name, ElemType::F32, shape, data.iter().flat_map(|v| v.to_le_bytes()));
    }

    pub fn i8s(&mut self, name: &str, shape: &[usize], data: &[i8]) {
        self.push_bytes(name, ElemType::I8, shape, data.iter().flat_map(|v| v.to_le_bytes()));
    }

    pub fn i32s(&mut self, name: &str, shape: &[usize], data: &[i32]) {
        self.push_bytes(name, ElemType::I32, shape, data.iter().flat_map(|v| v.to_le_bytes()));
    }

    /// Serializes header and blob; the byte layout is fully determined by the inputs.
    pub fn to_bytes<M: Serialize>(self, magic: &str, manifest: M) -> Result<Vec<u8>> {
        let envelope = Envelope {
            manifest,
            tensors: self.entries,
            blob_bytes: self.blob.len(),
            crc32: format!("{:08x}", crc32fast::hash(&self.blob)),
        };
        let header = serde_json::to_string(&envelope).map_err(|e| Error::format("<memory>", e.to_string()))?;
        let mut out = Vec::with_capacity(magic.len() + header.len() + self.blob.len() + 2);
        out.extend_from_slice(magic.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn write<M: Serialize>(self, path: &Path, magic: &str, manifest: M) -> Result<()> {
        let bytes = self.to_bytes(magic, manifest)?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

pub struct BlobReader {
    path: std::path::PathBuf,
    entries: Vec<BlobEntry>,
    blob: Vec<u8>,
    next: usize,
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let pos = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..pos], &bytes[pos + 1..]))
}

/// True if the file at `path` starts with the given magic line.
pub fn has_magic(path: &Path, magic: &str) -> bool {
    fs::read(path).ok().and_then(|b| split_line(&b).map(|(m, _)| m == magic.as_bytes())).unwrap_or(false)
}

pub fn read<M: DeserializeOwned>(path: &Path, magic: &str) -> Result<(M, BlobReader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (first, rest) = split_line(&bytes).ok_or_else(|| Error::format(path, "missing header"))?;
    if first != magic.as_bytes() {
        return Err(Error::format(path, format!("expected magic {magic:?}")));
    }
    let (header, blob) = split_line(rest).ok_or_else(|| Error::format(path, "missing manifest"))?;
    let envelope: Envelope<M> =
        serde_json::from_slice(header).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if blob.len() != envelope.blob_bytes {
        return Err(Error::format(
            path,
            format!("blob is {} bytes, manifest says {}", blob.len(), envelope.blob_bytes),
        ));
    }
    let expected = u32::from_str_radix(&envelope.crc32, 16)
        .map_err(|_| Error::format(path, format!("bad checksum field {:?}", envelope.crc32)))?;
    let actual = crc32fast::hash(blob);
    if expected != actual {
        return Err(Error::ChecksumMismatch { path: path.to_path_buf(), expected, actual });
    }
    let mut offset = 0;
    for e in &envelope.tensors {
        let elems: usize = e.shape.iter().product();
        if e.offset != offset || e.bytes != elems * e.dtype.size() {
            return Err(Error::format(path, format!("entry {:?} has inconsistent offset/shape/size", e.name)));
        }
        offset += e.bytes;
    }
    if offset != blob.len() {
        return Err(Error::format(path, "entries do not cover the blob"));
    }
    let reader = BlobReader { path: path.to_path_buf(), entries: envelope.tensors, blob: blob.to_vec(), next: 0 };
    Ok((envelope.manifest, reader))
}

impl BlobReader {
    fn take(&mut self, name: &str, dtype: ElemType, shape: &[usize]) -> Result<&[u8]> {
        let entry =
            self.entries.get(self.next).ok_or_else(|| Error::format(&self.path, format!("missing array {name:?}")))?;
        if entry.name != name || entry.dtype != dtype || entry.shape != shape {
            return Err(Error::format(
                &self.path,
                format!(
                    "array {} is {:?} {:?} {:?}, expected {:?} {:?} {:?}",
                    self.next, entry.name, entry.dtype, entry.shape, name, dtype, shape
                ),
            ));
        }
        self.next += 1;
        Ok(&self.blob[entry.offset..entry.offset + entry.bytes])
    }

    pub fn f32s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let b = self.take(name, ElemType::F32, shape)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn i8s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<i8>> {
        let b = self.take(name, ElemType::I8, shape)?;
        Ok(b.iter().map(|&v| v as i8).collect())
    }

    pub fn i32s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<i32>> {
        let b = self.take(name, ElemType::I32, shape)?;
        Ok(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Errors if any array was left unread.
    pub fn finish(self) -> Result<()> {
        if self.next != self.entries.len() {
            return Err(Error::format(
                &self.path,
                format!("{} unexpected trailing arrays", self.entries.len() - self.next),
            ));
        }
        Ok(())
    }
}
