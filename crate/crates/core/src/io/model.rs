//! Model files: a JSON manifest plus a little-endian `f64` parameter blob.
//!
//! The manifest starts with `"magic": "CBX1"` and lists every layer with
//! `{shape, offset, len}` entries into the blob, which sits next to the
//! manifest as `<manifest file name>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cbm::CbmModel;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Layer, Linear, MaxPool2d, Network};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &str = "CBX1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerEntry {
    Conv2d {
        stride: (usize, usize),
        padding: (usize, usize),
        params: Vec<ParamEntry>,
    },
    Linear {
        params: Vec<ParamEntry>,
    },
    Relu,
    Sigmoid,
    Softmax,
    MaxPool2d {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    BatchNorm2d {
        eps: f64,
        params: Vec<ParamEntry>,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkEntry {
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    magic: String,
    blob: String,
    /// Number of `f64` values in the blob.
    blob_len: usize,
    sigmoid_between: bool,
    concept_names: Vec<String>,
    class_names: Vec<String>,
    g: NetworkEntry,
    f: NetworkEntry,
}

fn push_params(blob: &mut Vec<f64>, tensors: &[&Tensor]) -> Vec<ParamEntry> {
    tensors
        .iter()
        .map(|t| {
            let entry = ParamEntry {
                shape: t.shape().to_vec(),
                offset: blob.len(),
                len: t.len(),
            };
            blob.extend_from_slice(t.data());
            entry
        })
        .collect()
}

fn encode_network(net: &Network, blob: &mut Vec<f64>) -> NetworkEntry {
    let layers = net
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Conv2d(c) => LayerEntry::Conv2d {
                stride: c.stride,
                padding: c.padding,
                params: push_params(blob, &[&c.weight, &c.bias]),
            },
            Layer::Linear(l) => LayerEntry::Linear {
                params: push_params(blob, &[&l.weight, &l.bias]),
            },
            Layer::Relu => LayerEntry::Relu,
            Layer::Sigmoid => LayerEntry::Sigmoid,
            Layer::Softmax => LayerEntry::Softmax,
            Layer::MaxPool2d(p) => LayerEntry::MaxPool2d {
                kernel: p.kernel,
                stride: p.stride,
            },
            Layer::BatchNorm2d(b) => LayerEntry::BatchNorm2d {
                eps: b.eps,
                params: push_params(blob, &[&b.gamma, &b.beta, &b.running_mean, &b.running_var]),
            },
            Layer::Flatten => LayerEntry::Flatten,
        })
        .collect();
    NetworkEntry {
        input_shape: net.input_shape.clone(),
        layers,
    }
}

fn take_params<const N: usize>(
    index: usize,
    entries: &[ParamEntry],
    blob: &[f64],
) -> Result<[Tensor; N]> {
    if entries.len() != N {
        return Err(Error::Malformed(format!(
            "layer {index}: expected {N} parameter tensors, found {}",
            entries.len()
        )));
    }
    let mut out = Vec::with_capacity(N);
    for e in entries {
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| {
                Error::CorruptOffsets(format!(
                    "layer {index}: [{}, +{}) exceeds blob of {} values",
                    e.offset,
                    e.len,
                    blob.len()
                ))
            })?;
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::CorruptOffsets(format!(
                "layer {index}: shape {:?} does not hold {} values",
                e.shape, e.len
            )));
        }
        out.push(
            Tensor::new(e.shape.clone(), blob[e.offset..end].to_vec())
                .map_err(|_| Error::shape(index, "non-empty parameter shape", &e.shape))?,
        );
    }
    Ok(out.try_into().expect("length checked"))
}

/// Parameter-shape errors become `ShapeMismatch` at the offending layer.
fn as_shape_mismatch(index: usize, e: Error, got: &[usize]) -> Error {
    match e {
        Error::Shape(msg) => Error::shape(index, msg, got),
        other => other,
    }
}

fn decode_network(entry: &NetworkEntry, blob: &[f64]) -> Result<Network> {
    let mut layers = Vec::with_capacity(entry.layers.len());
    for (i, le) in entry.layers.iter().enumerate() {
        let layer = match le {
            LayerEntry::Conv2d {
                stride,
                padding,
                params,
            } => {
                let [w, b] = take_params(i, params, blob)?;
                let got = w.shape().to_vec();
                Layer::Conv2d(
                    Conv2d::new(w, b, *stride, *padding)
                        .map_err(|e| as_shape_mismatch(i, e, &got))?,
                )
            }
            LayerEntry::Linear { params } => {
                let [w, b] = take_params(i, params, blob)?;
                let got = w.shape().to_vec();
                Layer::Linear(Linear::new(w, b).map_err(|e| as_shape_mismatch(i, e, &got))?)
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::Sigmoid => Layer::Sigmoid,
            LayerEntry::Softmax => Layer::Softmax,
            LayerEntry::MaxPool2d { kernel, stride } => Layer::MaxPool2d(MaxPool2d {
                kernel: *kernel,
                stride: *stride,
            }),
            LayerEntry::BatchNorm2d { eps, params } => {
                let [gamma, beta, running_mean, running_var] = take_params(i, params, blob)?;
                Layer::BatchNorm2d(BatchNorm2d {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps: *eps,
                })
            }
            LayerEntry::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    Network::new(entry.input_shape.clone(), layers)
}

/// Serialises a model to manifest text and blob bytes.
pub fn encode_model(model: &CbmModel, blob_name: &str) -> Result<(String, Vec<u8>)> {
    let mut values = Vec::new();
    let g = encode_network(&model.g, &mut values);
    let f = encode_network(&model.f, &mut values);
    let manifest = Manifest {
        magic: MODEL_MAGIC.to_string(),
        blob: blob_name.to_string(),
        blob_len: values.len(),
        sigmoid_between: model.sigmoid_between,
        concept_names: model.concept_names.clone(),
        class_names: model.class_names.clone(),
        g,
        f,
    };
    let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    Ok((serde_json::to_string_pretty(&manifest)?, bytes))
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Malformed(format!("manifest is not JSON: {e}")))?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(MODEL_MAGIC) => {}
        Some(other) => return Err(Error::BadMagic(other.to_string())),
        None => return Err(Error::BadMagic(String::new())),
    }
    serde_json::from_value(value).map_err(|e| Error::Malformed(format!("manifest: {e}")))
}

/// Inverse of [`encode_model`].
pub fn decode_model(manifest: &str, blob: &[u8]) -> Result<CbmModel> {
    let m = parse_manifest(manifest)?;
    if blob.len() % 8 != 0 || blob.len() / 8 != m.blob_len {
        return Err(Error::CorruptOffsets(format!(
            "blob has {} bytes, manifest promises {} values",
            blob.len(),
            m.blob_len
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let g = decode_network(&m.g, &values)?;
    let f = decode_network(&m.f, &values)?;
    CbmModel::new(g, f, m.sigmoid_between, m.concept_names, m.class_names)
}

/// Path of the parameter blob that accompanies `manifest_path`.
pub fn blob_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".bin");
    manifest_path.with_file_name(name)
}

pub fn save_model(model: &CbmModel, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let blob_name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("unusable model path {}", path.display())))?
        .to_string();
    let (manifest, bytes) = encode_model(model, &blob_name)?;
    fs::write(&blob, bytes)?;
    fs::write(path, manifest)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<CbmModel> {
    let text = fs::read_to_string(path)?;
    let m = parse_manifest(&text)?;
    if m.blob.contains('/') || m.blob.contains('\\') {
        return Err(Error::Malformed(format!(
            "blob name {:?} must be a bare file name",
            m.blob
        )));
    }
    let bytes = fs::read(path.with_file_name(&m.blob))?;
    decode_model(&text, &bytes)
}
