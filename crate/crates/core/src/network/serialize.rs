//! `.tnet` model files: one line of JSON manifest, a newline, then a raw
//! little-endian `f64` blob holding every weight tensor back to back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadKind, LayerSpec, NetworkModel};
use crate::error::{Error, ModelFileError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "tnet";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    endian: String,
    input_shape: Vec<usize>,
    frames: Option<usize>,
    head: HeadKind,
    layers: Vec<LayerSpec>,
    endpoints: BTreeMap<String, usize>,
    tensors: Vec<TensorEntry>,
    blob_bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    layer: usize,
    slot: usize,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
    /// Length in bytes.
    len: usize,
    crc32: u32,
}

/// Encodes a model into the `.tnet` byte layout.
pub fn to_bytes(model: &NetworkModel) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (layer, group) in model.weights().iter().enumerate() {
        for (slot, t) in group.iter().enumerate() {
            let start = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                layer,
                slot,
                shape: t.shape().to_vec(),
                offset: start,
                len: blob.len() - start,
                crc32: crc32fast::hash(&blob[start..]),
            });
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        endian: "little".into(),
        input_shape: model.input_shape().to_vec(),
        frames: model.frames(),
        head: model.head(),
        layers: model.layers().to_vec(),
        endpoints: model.endpoints().clone(),
        tensors,
        blob_bytes: blob.len(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

/// Decodes a `.tnet` byte buffer.
pub fn from_bytes(bytes: &[u8]) -> Result<NetworkModel> {
    let manifest_err = |m: String| Error::ModelFile(ModelFileError::Manifest(m));
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| manifest_err("no manifest terminator".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..split]).map_err(|e| manifest_err(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(manifest_err(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.endian != "little" {
        return Err(manifest_err(format!("unsupported endianness {}", manifest.endian)));
    }
    let blob = &bytes[split + 1..];
    if blob.len() < manifest.blob_bytes {
        return Err(ModelFileError::Truncated {
            expected: manifest.blob_bytes,
            found: blob.len(),
        }
        .into());
    }
    if blob.len() > manifest.blob_bytes {
        return Err(manifest_err(format!(
            "{} trailing bytes after blob",
            blob.len() - manifest.blob_bytes
        )));
    }

    let mut groups: Vec<Vec<Option<Tensor>>> = Vec::new();
    for e in &manifest.tensors {
        let name = format!("layer{}.{}", e.layer, e.slot);
        let n: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.len).filter(|&end| end <= blob.len());
        let Some(end) = end.filter(|_| e.len == n * 8) else {
            return Err(manifest_err(format!("tensor {name} has an invalid byte range")));
        };
        let raw = &blob[e.offset..end];
        if crc32fast::hash(raw) != e.crc32 {
            return Err(ModelFileError::Checksum { tensor: name }.into());
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| manifest_err(format!("tensor {name}: {err}")))?;
        if e.layer >= manifest.layers.len() {
            return Err(manifest_err(format!("tensor {name} refers to a missing layer")));
        }
        if groups.len() <= e.layer {
            groups.resize_with(e.layer + 1, Vec::new);
        }
        let g = &mut groups[e.layer];
        if g.len() <= e.slot {
            g.resize_with(e.slot + 1, || None);
        }
        if g[e.slot].replace(t).is_some() {
            return Err(manifest_err(format!("tensor {name} listed twice")));
        }
    }
    groups.resize_with(manifest.layers.len(), Vec::new);
    let mut weights = Vec::with_capacity(groups.len());
    for (layer, g) in groups.into_iter().enumerate() {
        let group = g
            .into_iter()
            .enumerate()
            .map(|(slot, t)| t.ok_or_else(|| manifest_err(format!("missing tensor layer{layer}.{slot}"))))
            .collect::<Result<Vec<_>>>()?;
        weights.push(group);
    }
    NetworkModel::from_parts(
        manifest.input_shape,
        manifest.frames,
        manifest.layers,
        weights,
        manifest.head,
        manifest.endpoints,
    )
    .map_err(|e| match e {
        Error::ModelFile(m) => Error::ModelFile(m),
        other => manifest_err(other.to_string()),
    })
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
