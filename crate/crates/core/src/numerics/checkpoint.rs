//! Single-file tensor checkpoints.
//!
//! Layout: an 8-byte little-endian header length `n`, then `n` bytes of JSON
//! header, then the raw little-endian `f64` payloads at the offsets the header
//! names (relative to the end of the header).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NdArray;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, NdArray)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = 8 * t.len() as u64;
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, nbytes });
            offset += nbytes;
        }
        let header = Header { format_version: FORMAT_VERSION, tensors: entries, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        if bytes.len() < 8 {
            return Err(bad("truncated header length".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize.checked_add(hlen).filter(|&e| e <= bytes.len());
        let Some(payload_start) = payload_start else {
            return Err(bad(format!("header length {hlen} exceeds file")));
        };
        let header: Header = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| bad(format!("header json: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.nbytes != 8 * n as u64 {
                return Err(bad(format!("tensor {} size disagrees with shape", e.name)));
            }
            let start = e.offset as usize;
            let Some(raw) = payload.get(start..start + e.nbytes as usize) else {
                return Err(bad(format!("tensor {} runs past end of file", e.name)));
            };
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((e.name, NdArray::new(e.shape, data)?));
        }
        Ok(Self { tensors, meta: header.meta })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f64>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let a = NdArray::from_vec(values[..split].to_vec());
            let b = NdArray::new([values.len() - split, 1], values[split..].to_vec()).unwrap();
            let ck = Checkpoint {
                tensors: vec![("a".into(), a.clone()), ("b.w".into(), b.clone())],
                meta: serde_json::json!({"k": 8}),
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
            let bits = |t: &NdArray| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back.get("a").unwrap()), bits(&a));
            prop_assert_eq!(bits(back.get("b.w").unwrap()), bits(&b));
            prop_assert_eq!(back.get("b.w").unwrap().shape(), b.shape());
            prop_assert_eq!(back.meta["k"].as_u64(), Some(8));
        }
    }

    #[test]
    fn wrong_version_is_a_format_error() {
        let ck = Checkpoint { tensors: vec![("x".into(), NdArray::scalar(1.0))], meta: Default::default() };
        let mut bytes = ck.to_bytes().unwrap();
        let s = String::from_utf8_lossy(&bytes).replace("\"format_version\":1", "\"format_version\":9");
        bytes = s.into_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint { tensors: vec![("x".into(), NdArray::from_vec(vec![0.1, -2.5]))], meta: Default::default() };
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().get("x").unwrap().data(), &[0.1, -2.5]);
    }
}
