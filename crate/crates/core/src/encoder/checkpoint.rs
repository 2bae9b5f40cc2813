//! Versioned binary checkpoint container: a JSON header describing the run
//! and the tensor directory, followed by little-endian f64 blobs in the
//! declared order.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PANOCKPT";
pub const VERSION: u32 = 1;

/// Header metadata plus named tensor blobs, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let directory: Vec<Value> = container
        .tensors
        .iter()
        .map(|(name, data)| json!({ "name": name, "len": data.len() }))
        .collect();
    let mut header = container.meta.clone();
    header["tensors"] = Value::Array(directory);
    let header_bytes = serde_json::to_vec(&header)?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, data) in &container.tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bad = |reason: &str| Error::Format {
        format: "checkpoint",
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 20 || &data[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(data[12..20].try_into().unwrap()) as usize;
    if data.len() < 20 + header_len {
        return Err(bad("truncated header"));
    }
    let mut meta: Value = serde_json::from_slice(&data[20..20 + header_len])?;
    let directory = meta
        .get("tensors")
        .and_then(Value::as_array)
        .cloned()
        .ok_or_else(|| bad("header missing tensor directory"))?;

    let mut offset = 20 + header_len;
    let mut tensors = Vec::with_capacity(directory.len());
    for entry in &directory {
        let name = entry
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("tensor entry missing name"))?
            .to_string();
        let len = entry
            .get("len")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("tensor entry missing len"))? as usize;
        let bytes = len * 8;
        if data.len() < offset + bytes {
            return Err(bad(&format!("truncated blob for {name}")));
        }
        let values = data[offset..offset + bytes]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, values));
        offset += bytes;
    }
    if let Some(obj) = meta.as_object_mut() {
        obj.remove("tensors");
    }
    Ok(Container { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let original = Container {
            meta: json!({ "epoch": 3, "seed": 17, "note": "x" }),
            tensors: vec![
                ("a.weight".into(), vec![1.5, -2.25, f64::MIN_POSITIVE, 0.1]),
                ("b.bias".into(), vec![]),
                ("c".into(), vec![std::f64::consts::PI]),
            ],
        };
        write_container(&path, &original).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        assert_eq!(back.tensors.len(), 3);
        for ((n1, d1), (n2, d2)) in original.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(d1.len(), d2.len());
            for (a, b) in d1.iter().zip(d2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(read_container(&path).is_err());
    }
}
