//! LMK1 single-file container.
//!
//! Layout: `"LMK1"`, a little-endian `u32` header length, a UTF-8 JSON header,
//! then the row-major little-endian `f32` payloads back to back. Tensor keys
//! are `task/layer/B`, `task/layer/A`, and `__base__/layer/W`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdapterCollection, LayerAdapters, LoraAdapter, BASE_KEY};
use crate::error::{ContainerError, Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"LMK1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    layers: Vec<String>,
    tasks: Vec<String>,
    adapters: Vec<AdapterMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    task: String,
    layer: String,
    rank: usize,
    lora_alpha: f64,
    dropout: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    key: String,
    dtype: String,
    shape: [usize; 2],
    offset: usize,
    length: usize,
}

fn push_tensor(key: String, m: &Matrix, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>) {
    let offset = payload.len();
    for &v in m.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    entries.push(TensorEntry {
        key,
        dtype: "f32".into(),
        shape: [m.rows(), m.cols()],
        offset,
        length: payload.len() - offset,
    });
}

/// Serialises a collection. Values are narrowed to `f32`.
pub fn write_collection(coll: &AdapterCollection, out: &mut impl Write) -> Result<()> {
    coll.validate()?;
    let mut tensors = Vec::new();
    let mut adapters = Vec::new();
    let mut payload = Vec::new();
    for (lid, layer) in coll.layer_ids.iter().zip(&coll.layers) {
        push_tensor(format!("{BASE_KEY}/{lid}/W"), &layer.base, &mut tensors, &mut payload);
        for ad in &layer.adapters {
            push_tensor(format!("{}/{lid}/B", ad.task_id), &ad.b, &mut tensors, &mut payload);
            push_tensor(format!("{}/{lid}/A", ad.task_id), &ad.a, &mut tensors, &mut payload);
            adapters.push(AdapterMeta {
                task: ad.task_id.clone(),
                layer: lid.clone(),
                rank: ad.rank(),
                lora_alpha: ad.lora_alpha,
                dropout: ad.dropout,
            });
        }
    }
    let header = Header {
        version: VERSION,
        layers: coll.layer_ids.clone(),
        tasks: coll.task_ids.clone(),
        adapters,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header_bytes.len()).map_err(|_| Error::invalid("header too large"))?;
    out.write_all(MAGIC)?;
    out.write_all(&header_len.to_le_bytes())?;
    out.write_all(&header_bytes)?;
    out.write_all(&payload)?;
    Ok(())
}

pub fn save_collection(coll: &AdapterCollection, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_collection(coll, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_collection(path: impl AsRef<Path>) -> Result<AdapterCollection> {
    read_collection(&fs::read(path)?)
}

/// Parses a container, promoting the `f32` payloads to `f64`.
pub fn read_collection(bytes: &[u8]) -> Result<AdapterCollection> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic.into());
    }
    if bytes.len() < 8 {
        return Err(ContainerError::Truncated("missing header length".into()).into());
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(ContainerError::Truncated(format!(
            "header declares {header_len} bytes, {} available",
            bytes.len() - 8
        ))
        .into());
    }
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| ContainerError::BadHeader(e.to_string()))?;
    if header.version != VERSION {
        return Err(ContainerError::BadHeader(format!("unsupported version {}", header.version)).into());
    }
    let payload = &bytes[payload_start..];

    let mut seen = HashSet::new();
    let mut tensors: BTreeMap<&str, Matrix> = BTreeMap::new();
    let mut declared = 0usize;
    for t in &header.tensors {
        if !seen.insert(t.key.as_str()) {
            return Err(ContainerError::DuplicateKey(t.key.clone()).into());
        }
        if t.dtype != "f32" {
            return Err(ContainerError::BadHeader(format!("{}: unsupported dtype {}", t.key, t.dtype)).into());
        }
        let expected = t.shape[0] * t.shape[1] * 4;
        if t.length != expected {
            return Err(ContainerError::PayloadSizeMismatch {
                key: t.key.clone(),
                expected,
                actual: t.length,
            }
            .into());
        }
        let end = t.offset.checked_add(t.length).ok_or_else(|| ContainerError::BadHeader("offset overflow".into()))?;
        if end > payload.len() {
            return Err(ContainerError::Truncated(format!(
                "{} ends at byte {end}, payload has {}",
                t.key,
                payload.len()
            ))
            .into());
        }
        let data = payload[t.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let m = Matrix::from_vec(t.shape[0], t.shape[1], data)?;
        tensors.insert(t.key.as_str(), m);
        declared += t.length;
    }
    if declared != payload.len() {
        return Err(ContainerError::PayloadSizeMismatch {
            key: "<payload>".into(),
            expected: declared,
            actual: payload.len(),
        }
        .into());
    }

    let mut meta: BTreeMap<(&str, &str), &AdapterMeta> = BTreeMap::new();
    for m in &header.adapters {
        if meta.insert((m.task.as_str(), m.layer.as_str()), m).is_some() {
            return Err(ContainerError::DuplicateKey(format!("{}/{}", m.task, m.layer)).into());
        }
    }
    if meta.len() != header.tasks.len() * header.layers.len() {
        return Err(ContainerError::InconsistentTasks(format!(
            "{} adapter records for {} tasks x {} layers",
            meta.len(),
            header.tasks.len(),
            header.layers.len()
        ))
        .into());
    }
    let mut take = |key: String| -> Result<Matrix> {
        tensors
            .remove(key.as_str())
            .ok_or_else(|| ContainerError::BadHeader(format!("missing tensor {key}")).into())
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for lid in &header.layers {
        let base = take(format!("{BASE_KEY}/{lid}/W"))?;
        let mut adapters = Vec::with_capacity(header.tasks.len());
        for tid in &header.tasks {
            let m = meta
                .get(&(tid.as_str(), lid.as_str()))
                .ok_or_else(|| ContainerError::InconsistentTasks(format!("no adapter for {tid}/{lid}")))?;
            let b = take(format!("{tid}/{lid}/B"))?;
            let a = take(format!("{tid}/{lid}/A"))?;
            if b.cols() != m.rank || a.cols() != m.rank {
                return Err(Error::shape(format!("{tid}/{lid}: factors disagree with rank {}", m.rank)));
            }
            adapters.push(LoraAdapter {
                task_id: tid.clone(),
                layer_id: lid.clone(),
                b,
                a,
                lora_alpha: m.lora_alpha,
                dropout: m.dropout,
            });
        }
        layers.push(LayerAdapters { base, adapters });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ContainerError::BadHeader(format!("unreferenced tensor {extra}")).into());
    }
    AdapterCollection::new(header.layers, header.tasks, layers)
}

fn lossy(m: &Matrix) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .map(|v| {
                    let s = format!("{v:.8e}");
                    serde_json::Value::from(s.parse::<f64>().unwrap_or(0.0))
                })
                .collect()
        })
        .collect();
    serde_json::Value::Array(rows)
}

/// Human-readable dump with 9 significant digits. Not a round-trip format.
pub fn export_debug_json(coll: &AdapterCollection) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = coll
        .layer_ids
        .iter()
        .zip(&coll.layers)
        .map(|(lid, layer)| {
            let adapters: Vec<serde_json::Value> = layer
                .adapters
                .iter()
                .map(|ad| {
                    serde_json::json!({
                        "task": ad.task_id,
                        "rank": ad.rank(),
                        "lora_alpha": ad.lora_alpha,
                        "dropout": ad.dropout,
                        "B": lossy(&ad.b),
                        "A": lossy(&ad.a),
                    })
                })
                .collect();
            serde_json::json!({ "layer": lid, "base": lossy(&layer.base), "adapters": adapters })
        })
        .collect();
    serde_json::json!({ "format": "lmk1-debug", "tasks": coll.task_ids, "layers": layers })
}
