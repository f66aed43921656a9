//! Container of named little-endian numeric arrays with a JSON header.
//!
//! Layout:
//!
//! ```text
//! b"EVCARC01" | u64 LE header length | UTF-8 JSON header | array data | SHA-256 of all preceding bytes
//! ```
//!
//! The header is `{"meta": <any>, "arrays": [{"name", "dtype", "shape", "offset"}]}`
//! with `offset` counted in bytes from the start of the data block. Arrays are
//! written row-major. Used for feature cache records (`f32`) and parameter
//! checkpoints (`f64`, so that saved weights reload bit for bit).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{EvcError, Result};
use crate::tape::Mat;

const MAGIC: &[u8; 8] = b"EVCARC01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: DType,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    arrays: Vec<(String, DType, Mat)>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Archive {
            meta,
            arrays: Vec::new(),
        }
    }

    /// Adds an array. `F32` arrays are rounded to single precision on write.
    pub fn push(&mut self, name: impl Into<String>, dtype: DType, value: Mat) {
        self.arrays.push((name.into(), dtype, value));
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Mat> {
        self.get(name)
            .ok_or_else(|| EvcError::data(format!("archive has no array `{name}`")))
    }

    pub fn arrays(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.arrays.iter().map(|(n, _, m)| (n.as_str(), m))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut data = Vec::new();
        for (name, dtype, m) in &self.arrays {
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: *dtype,
                shape: [m.nrows(), m.ncols()],
                offset: data.len(),
            });
            for &x in m.as_standard_layout().iter() {
                match dtype {
                    DType::F32 => data.extend_from_slice(&(x as f32).to_le_bytes()),
                    DType::F64 => data.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: entries,
        })
        .expect("archive header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + data.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
            return Err("not an archive (bad magic or truncated)".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch (file corrupted)".into());
        }
        let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or("header length exceeds file")?;
        let header: Header =
            serde_json::from_slice(&body[16..header_end]).map_err(|e| format!("bad header: {e}"))?;
        let data = &body[header_end..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let [r, c] = e.shape;
            let w = e.dtype.width();
            let end = e
                .offset
                .checked_add(r * c * w)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| format!("array `{}` exceeds data block", e.name))?;
            let raw = &data[e.offset..end];
            let values: Vec<f64> = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            let m = Mat::from_shape_vec((r, c), values).map_err(|e| e.to_string())?;
            arrays.push((e.name, e.dtype, m));
        }
        Ok(Archive {
            meta: header.meta,
            arrays,
        })
    }

    /// Writes through a temporary sibling file and renames it into place.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| EvcError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Archive::from_bytes(&bytes).map_err(|message| EvcError::Load {
            path: path.to_path_buf(),
            message,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| EvcError::invalid(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    proptest! {
        #[test]
        fn f64_arrays_roundtrip_bitwise(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let m = Mat::from_shape_fn((rows, cols), |(i, j)| {
                f64::from_bits(seed.rotate_left((i * cols + j) as u32) | 1) .clamp(-1e300, 1e300)
            });
            let mut a = Archive::new(json!({"k": 1}));
            a.push("w", DType::F64, m.clone());
            let b = Archive::from_bytes(&a.to_bytes()).unwrap();
            let got = b.get("w").unwrap();
            prop_assert!(got.iter().zip(m.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn f32_arrays_are_rounded() {
        let mut a = Archive::new(json!(null));
        a.push("x", DType::F32, Mat::from_elem((1, 1), 0.1));
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.get("x").unwrap()[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn corruption_is_detected() {
        let mut a = Archive::new(json!({"stage": 1}));
        a.push("x", DType::F64, Mat::ones((3, 3)));
        let mut bytes = a.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(Archive::from_bytes(&bytes).unwrap_err().contains("checksum"));
        assert!(Archive::from_bytes(b"garbage").is_err());
    }
}
