//! Parameter files: a JSON manifest naming each tensor's shape and byte range,
//! next to a little-endian `f32` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dims, ParamStore, Tensor};
use crate::volumes::sidecar_paths;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 5],
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// Writes `<base>.json` and `<base>.raw`. `meta` is stored verbatim.
pub fn write_params(store: &ParamStore<f32>, meta: &BTreeMap<String, String>, base: &Path) -> Result<()> {
    let (json_path, raw_path) = sidecar_paths(base);
    let mut blob = Vec::with_capacity(store.numel() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.dims().to_array(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest { dtype: "f32".into(), meta: meta.clone(), tensors };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json { path: json_path.clone(), source })?;
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, blob).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn read_params(base: &Path) -> Result<(ParamStore<f32>, BTreeMap<String, String>)> {
    let (json_path, raw_path) = sidecar_paths(base);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: json_path.clone(), source })?;
    if manifest.dtype != "f32" {
        return Err(Error::UnknownDtype(manifest.dtype));
    }
    let blob = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let dims = Dims::from_array(e.shape);
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len());
        let Some(end) = end.filter(|_| e.length == dims.len() * 4) else {
            return Err(Error::Checkpoint(format!(
                "entry {} (offset {}, length {}) does not fit shape {dims} in a {}-byte blob",
                e.name,
                e.offset,
                e.length,
                blob.len()
            )));
        };
        let data = blob[e.offset..end].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if store.find(&e.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry {}", e.name)));
        }
        store.push(e.name, Tensor::new(dims, data)?);
    }
    Ok((store, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = crate::seed::rng(3);
        let mut store = ParamStore::new();
        store.push("ct/enc0/w", Tensor::from_fn(Dims::new(4, 1, 3, 3, 3), |_| rng.random::<f32>() - 0.5));
        store.push("pet/head/b", Tensor::from_fn(Dims::new(1, 1, 1, 1, 1), |_| f32::MIN_POSITIVE));
        let meta = BTreeMap::from([("epoch".to_string(), "7".to_string())]);
        let base = dir.path().join("model");
        write_params(&store, &meta, &base).unwrap();
        let (back, back_meta) = read_params(&base).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.len(), store.len());
        for ((n0, t0), (n1, t1)) in store.iter().zip(back.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dims(), t1.dims());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t0), bits(t1));
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.push("w", Tensor::<f32>::zeros(Dims::new(2, 1, 1, 1, 1)));
        let base = dir.path().join("m");
        write_params(&store, &BTreeMap::new(), &base).unwrap();
        fs::write(dir.path().join("m.raw"), [0u8; 4]).unwrap();
        assert!(matches!(read_params(&base), Err(Error::Checkpoint(_))));
    }
}
