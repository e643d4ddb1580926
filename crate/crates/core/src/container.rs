//! Single-file artifact container: a JSON header followed by length-prefixed
//! little-endian float arrays in header order.
//!
//! Layout:
//!
//! ```text
//! bytes 0..4   magic "ICPD"
//! bytes 4..8   u32 LE header byte length
//! header       UTF-8 JSON, carrying an "arrays" list of [`ArrayMeta`]
//! per array    u64 LE element count, then elements (f32 or f64, LE)
//! ```
//!
//! Datasets store f32 arrays; checkpoints store f64 so that resume is exact.
//! Byte offsets in the metadata are relative to the first byte after the
//! header, so the header can be serialized before the payload is laid out.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"ICPD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Offset of this array's length prefix, relative to the end of the header.
    pub byte_offset: u64,
}

/// An array staged for writing (or produced by reading). Values are held as
/// f64 regardless of storage dtype; f32 storage rounds on write.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayData {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ArrayData {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        ArrayData {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            values,
        }
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        ArrayData {
            name: name.into(),
            dtype: Dtype::F64,
            shape,
            values,
        }
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Compute the metadata (with byte offsets) for a sequence of arrays.
pub fn plan_arrays(arrays: &[ArrayData]) -> Result<Vec<ArrayMeta>> {
    let mut metas = Vec::with_capacity(arrays.len());
    let mut offset = 0u64;
    for a in arrays {
        if a.element_count() != a.values.len() {
            return Err(Error::format(format!(
                "array {} shape {:?} does not match {} values",
                a.name,
                a.shape,
                a.values.len()
            )));
        }
        metas.push(ArrayMeta {
            name: a.name.clone(),
            dtype: a.dtype,
            shape: a.shape.clone(),
            byte_offset: offset,
        });
        offset += 8 + (a.values.len() * a.dtype.byte_width()) as u64;
    }
    Ok(metas)
}

/// Serialize a header (any JSON-serializable struct that embeds the planned
/// `arrays` metadata) plus the array payloads.
pub fn write_container<H: Serialize>(path: &Path, header: &H, arrays: &[ArrayData]) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(header_bytes.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for a in arrays {
        out.extend_from_slice(&(a.values.len() as u64).to_le_bytes());
        match a.dtype {
            Dtype::F32 => {
                for &v in &a.values {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &a.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// A fully read container: raw header JSON plus arrays by name.
#[derive(Debug)]
pub struct Container {
    pub header: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayData>,
}

impl Container {
    pub fn typed_header<H: for<'de> Deserialize<'de>>(&self) -> Result<H> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn array(&self, name: &str) -> Result<&ArrayData> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::format(format!("container missing array '{name}'")))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    if buf.len() < 8 || &buf[0..4] != MAGIC {
        return Err(Error::format(format!(
            "{} is not a container file",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
    let header_end = 8 + header_len;
    if buf.len() < header_end {
        return Err(Error::format("truncated header"));
    }
    let header: serde_json::Value = serde_json::from_slice(&buf[8..header_end])?;
    let metas: Vec<ArrayMeta> = serde_json::from_value(
        header
            .get("arrays")
            .cloned()
            .ok_or_else(|| Error::format("header has no 'arrays' field"))?,
    )?;

    let payload = &buf[header_end..];
    let mut arrays = BTreeMap::new();
    for meta in metas {
        let at = meta.byte_offset as usize;
        if payload.len() < at + 8 {
            return Err(Error::format(format!("array {} out of bounds", meta.name)));
        }
        let count = u64::from_le_bytes(payload[at..at + 8].try_into().unwrap()) as usize;
        let expected: usize = meta.shape.iter().product();
        if count != expected {
            return Err(Error::format(format!(
                "array {} length prefix {count} does not match shape {:?}",
                meta.name, meta.shape
            )));
        }
        let width = meta.dtype.byte_width();
        let start = at + 8;
        let end = start + count * width;
        if payload.len() < end {
            return Err(Error::format(format!("array {} truncated", meta.name)));
        }
        let mut values = Vec::with_capacity(count);
        match meta.dtype {
            Dtype::F32 => {
                for chunk in payload[start..end].chunks_exact(4) {
                    values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            }
            Dtype::F64 => {
                for chunk in payload[start..end].chunks_exact(8) {
                    values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
        }
        arrays.insert(
            meta.name.clone(),
            ArrayData {
                name: meta.name,
                dtype: meta.dtype,
                shape: meta.shape,
                values,
            },
        );
    }
    Ok(Container { header, arrays })
}

/// SHA-256 of a file's bytes, hex-encoded. Used for artifact provenance.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let out = Sha256::digest(&bytes);
    Ok(out.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_f32_and_f64_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.icpd");
        let a32 = ArrayData::f32("a", vec![2, 2], vec![1.5, -2.25, 0.0, 3.625]);
        let a64 = ArrayData::f64("b", vec![3], vec![std::f64::consts::PI, -1.0, 1e-300]);
        let arrays = vec![a32.clone(), a64.clone()];
        let metas = plan_arrays(&arrays).unwrap();
        let header = json!({"kind": "test", "arrays": metas});
        write_container(&path, &header, &arrays).unwrap();

        let c = read_container(&path).unwrap();
        assert_eq!(c.array("a").unwrap().values, a32.values);
        assert_eq!(c.array("b").unwrap().values, a64.values);
        assert_eq!(c.header["kind"], "test");
    }

    #[test]
    fn f32_storage_rounds_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.icpd");
        let exact = std::f64::consts::PI;
        let arrays = vec![ArrayData::f32("x", vec![1], vec![exact])];
        let metas = plan_arrays(&arrays).unwrap();
        write_container(&path, &json!({"arrays": metas}), &arrays).unwrap();
        let c = read_container(&path).unwrap();
        let got = c.array("x").unwrap().values[0];
        assert_eq!(got, exact as f32 as f64);
        assert_ne!(got, exact);
    }

    #[test]
    fn writes_are_byte_identical_across_calls() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.icpd");
        let p2 = dir.path().join("b.icpd");
        let arrays = vec![ArrayData::f32("x", vec![3], vec![0.1, 0.2, 0.3])];
        let metas = plan_arrays(&arrays).unwrap();
        let header = json!({"kind": "t", "arrays": metas});
        write_container(&p1, &header, &arrays).unwrap();
        write_container(&p2, &header, &arrays).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bad = vec![ArrayData::f32("x", vec![4], vec![1.0, 2.0])];
        assert!(plan_arrays(&bad).is_err());
    }
}
