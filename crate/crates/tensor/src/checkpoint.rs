//! Checkpoint directory format: one raw little-endian row-major binary
//! file per tensor plus a JSON manifest listing {name, shape, dtype,
//! file}. Tensor files are written before the manifest so a manifest on
//! disk never references missing data.

use crate::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    file: String,
}

pub fn save(dir: &Path, tensors: &[(String, Tensor)]) -> Result<(), TensorError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (i, (name, t)) in tensors.iter().enumerate() {
        let file = format!("tensor_{i:04}.bin");
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(dir.join(&file))?;
        f.write_all(&bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            file,
        });
    }
    let manifest = serde_json::to_string_pretty(&entries)?;
    fs::write(dir.join("manifest.json"), manifest)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    let manifest = fs::read_to_string(dir.join("manifest.json"))?;
    let entries: Vec<TensorEntry> = serde_json::from_str(&manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f64" {
            return Err(TensorError::Integrity(format!(
                "tensor {}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| {
            TensorError::Integrity(format!("tensor {}: missing file {}: {err}", e.name, e.file))
        })?;
        let expected = e.shape.iter().product::<usize>() * 8;
        if bytes.len() != expected {
            return Err(TensorError::Integrity(format!(
                "tensor {}: file {} has {} bytes, expected {expected}",
                e.name,
                e.file,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)));
    }
    Ok(out)
}
