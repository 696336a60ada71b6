//! Model checkpoint files.
//!
//! Layout: the 8-byte magic `UPITCKPT`, a little-endian `u32` version, a
//! `u32` header length, a JSON header, then every parameter tensor as
//! little-endian `f64` in [`ModelParams::tensors`] order, followed by the
//! normalization mean and inverse deviation when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use upit_core::model::{init_params, FeatureNorm, ModelParams, ModelSpec};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"UPITCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<usize>,
    normalized: bool,
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let tensors = params.tensors();
    let header = Header {
        spec: params.spec().clone(),
        tensors: tensors.iter().map(|t| t.len()).collect(),
        normalized: params.norm().is_some(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let norm = params.norm().map(|n| [&n.mean[..], &n.inv_std[..]]);
    for t in tensors.iter().copied().chain(norm.into_iter().flatten()) {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let bad = |reason: &str| CliError::format("checkpoint", path, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing UPITCKPT magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut params = init_params(&header.spec, 0)?;
    let expected: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if expected != header.tensors {
        return Err(bad("tensor sizes do not match the layer specs"));
    }
    let mut values = bytes[16 + len..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let bins = header.spec.input_bins;
    let needed = expected.iter().sum::<usize>() + if header.normalized { 2 * bins } else { 0 };
    if bytes.len() - 16 - len != 8 * needed {
        return Err(bad("parameter data has the wrong length"));
    }
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    if header.normalized {
        let mean: Vec<f64> = values.by_ref().take(bins).collect();
        let inv_std: Vec<f64> = values.take(bins).collect();
        params.set_norm(Some(FeatureNorm { mean, inv_std }))?;
    }
    if !params.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use upit_core::model::{LayerSpec, OutputActivation};

    fn params() -> ModelParams {
        let spec = ModelSpec {
            input_bins: 5,
            speakers: 2,
            layers: vec![LayerSpec::BiRecurrent { width: 3 }, LayerSpec::Recurrent { width: 2 }],
            output: OutputActivation::Relu,
            dropout: 0.25,
        };
        let mut p = init_params(&spec, 9).unwrap();
        p.set_norm(Some(FeatureNorm { mean: vec![0.1; 5], inv_std: vec![2.0; 5] })).unwrap();
        p
    }

    #[test]
    fn round_trip_bit_exact() {
        let p = params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &p).unwrap();
        let q = load(&path).unwrap();
        assert_eq!(q, p);
        let bits = |m: &ModelParams| -> Vec<u64> { m.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&q), bits(&p));
    }

    #[test]
    fn corrupt_files_rejected() {
        let p = params();
        let path = Path::new("x");
        let mut bytes = encode(&p);
        assert!(decode(&bytes[..bytes.len() - 1], path).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes, path).is_err());
        let mut v2 = encode(&p);
        v2[8] = 2;
        assert!(decode(&v2, path).is_err());
    }
}
