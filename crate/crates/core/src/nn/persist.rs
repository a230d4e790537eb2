//! Versioned JSON model files.
//!
//! Parameter arrays are stored as base64 of their IEEE-754 little-endian
//! `f64` bytes; matrices are row-major (`out × in`). A caller-defined header
//! travels alongside the layers.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::net::{Activation, BatchNorm, DenseNet, Layer};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "fatigue-fusion-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BnRecord {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
    momentum: f64,
    epsilon: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerRecord {
    input_dim: usize,
    output_dim: usize,
    activation: Activation,
    weight: String,
    bias: String,
    batch_norm: Option<BnRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelFile<H> {
    format: String,
    version: u32,
    byte_order: String,
    schema_fingerprint: String,
    header: H,
    layers: Vec<LayerRecord>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::MalformedModel(format!("{what}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(Error::MalformedModel(format!(
            "{what}: expected {expected} values, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn vector(text: &str, len: usize, what: &str) -> Result<Array1<f64>> {
    Ok(Array1::from(decode(text, len, what)?))
}

fn flat(a: &Array1<f64>) -> String {
    encode(a.as_slice().expect("standard layout"))
}

/// Serializes `net` with `header` into the model-file JSON text.
pub fn model_to_json<H: Serialize>(net: &DenseNet, fingerprint: &str, header: &H) -> Result<String> {
    let layers = net
        .layers()
        .iter()
        .map(|l| LayerRecord {
            input_dim: l.input_dim(),
            output_dim: l.output_dim(),
            activation: l.activation,
            weight: encode(&l.weight.iter().copied().collect::<Vec<_>>()),
            bias: flat(&l.bias),
            batch_norm: l.batch_norm.as_ref().map(|bn| BnRecord {
                gamma: flat(&bn.gamma),
                beta: flat(&bn.beta),
                running_mean: flat(&bn.running_mean),
                running_var: flat(&bn.running_var),
                momentum: bn.momentum,
                epsilon: bn.epsilon,
            }),
        })
        .collect();
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        byte_order: "f64-le".to_string(),
        schema_fingerprint: fingerprint.to_string(),
        header,
        layers,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// Parses model-file JSON. When `expected_fingerprint` is given, a different
/// stored fingerprint is rejected.
pub fn model_from_json<H: DeserializeOwned>(text: &str, expected_fingerprint: Option<&str>) -> Result<(DenseNet, H, String)> {
    let file: ModelFile<H> = serde_json::from_str(text)?;
    if file.format != MODEL_FORMAT {
        return Err(Error::MalformedModel(format!("unknown format {:?}", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::MalformedModel(format!("unsupported version {}", file.version)));
    }
    if file.byte_order != "f64-le" {
        return Err(Error::MalformedModel(format!("unsupported byte order {:?}", file.byte_order)));
    }
    if let Some(expected) = expected_fingerprint {
        if expected != file.schema_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: file.schema_fingerprint,
            });
        }
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, r) in file.layers.iter().enumerate() {
        let (o, n) = (r.output_dim, r.input_dim);
        let weight = Array2::from_shape_vec((o, n), decode(&r.weight, o * n, &format!("layer {i} weight"))?)
            .map_err(|e| Error::MalformedModel(e.to_string()))?;
        let batch_norm = match &r.batch_norm {
            Some(b) => Some(BatchNorm {
                gamma: vector(&b.gamma, o, "gamma")?,
                beta: vector(&b.beta, o, "beta")?,
                running_mean: vector(&b.running_mean, o, "running_mean")?,
                running_var: vector(&b.running_var, o, "running_var")?,
                momentum: b.momentum,
                epsilon: b.epsilon,
            }),
            None => None,
        };
        layers.push(Layer {
            weight,
            bias: vector(&r.bias, o, &format!("layer {i} bias"))?,
            activation: r.activation,
            batch_norm,
        });
    }
    let net = DenseNet::new(layers).map_err(|e| Error::MalformedModel(e.to_string()))?;
    Ok((net, file.header, file.schema_fingerprint))
}

pub fn save_model<H: Serialize>(path: &Path, net: &DenseNet, fingerprint: &str, header: &H) -> Result<()> {
    std::fs::write(path, model_to_json(net, fingerprint, header)?)?;
    Ok(())
}

pub fn load_model<H: DeserializeOwned>(path: &Path, expected_fingerprint: Option<&str>) -> Result<(DenseNet, H, String)> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text, expected_fingerprint)
}
