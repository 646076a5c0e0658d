//! Minimal safetensors reader/writer.
//!
//! Layout: u64 little-endian header length, a JSON header mapping tensor
//! names to `{dtype, shape, data_offsets}`, then the raw little-endian
//! payload. Offsets are relative to the first payload byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::kernels::Tensor;

const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

/// An opened safetensors file. Tensors are read lazily, one at a time.
#[derive(Debug)]
pub struct SafeTensors {
    path: PathBuf,
    data_start: u64,
    tensors: BTreeMap<String, TensorInfo>,
}

impl SafeTensors {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| Error::Safetensors("file shorter than the 8-byte header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_LEN || 8 + header_len > file_len {
            return Err(Error::Safetensors(format!(
                "header length {header_len} is invalid for a {file_len}-byte file"
            )));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header)
            .map_err(|e| Error::io(&path, e))?;
        let raw: BTreeMap<String, Value> = serde_json::from_slice(&header)
            .map_err(|e| Error::Safetensors(format!("header is not valid JSON: {e}")))?;

        let payload_len = (file_len - 8 - header_len) as usize;
        let mut tensors = BTreeMap::new();
        for (name, value) in raw {
            if name == "__metadata__" {
                continue;
            }
            let entry: RawEntry = serde_json::from_value(value)
                .map_err(|e| Error::Safetensors(format!("entry `{name}`: {e}")))?;
            let dtype = match entry.dtype.as_str() {
                "F32" => Dtype::F32,
                "F16" => Dtype::F16,
                other => {
                    return Err(Error::UnsupportedDtype {
                        name,
                        dtype: other.to_string(),
                    })
                }
            };
            let (start, end) = entry.data_offsets;
            let numel: usize = entry.shape.iter().product();
            if start > end || end > payload_len || end - start != numel * dtype.size() {
                return Err(Error::Safetensors(format!(
                    "entry `{name}` has inconsistent offsets {start}..{end}"
                )));
            }
            tensors.insert(
                name,
                TensorInfo {
                    dtype,
                    shape: entry.shape,
                    start,
                    end,
                },
            );
        }
        Ok(Self {
            path,
            data_start: 8 + header_len,
            tensors,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    /// Read one tensor, converting f16 payloads to f32.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let info = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let mut file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        file.seek(SeekFrom::Start(self.data_start + info.start as u64))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; info.end - info.start];
        file.read_exact(&mut bytes)
            .map_err(|e| Error::io(&self.path, e))?;
        let data: Vec<f32> = match info.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
        };
        Tensor::new(info.shape.clone(), data)
    }
}

/// Write f32 tensors in safetensors layout. Entries are laid out in name order.
pub fn write<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let path = path.as_ref();
    let sorted: BTreeMap<&str, &Tensor> = tensors.into_iter().collect();
    let mut header = serde_json::Map::new();
    let mut offset = 0usize;
    for (name, t) in &sorted {
        let end = offset + t.len() * 4;
        let entry = RawEntry {
            dtype: "F32".into(),
            shape: t.shape().to_vec(),
            data_offsets: (offset, end),
        };
        header.insert((*name).to_string(), serde_json::to_value(entry)?);
        offset = end;
    }
    let mut header_bytes = serde_json::to_vec(&header)?;
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io)?;
    w.write_all(&header_bytes).map_err(io)?;
    for t in sorted.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
