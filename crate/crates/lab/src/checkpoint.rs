// SPDX-License-Identifier: MIT OR Apache-2.0

//! `MLSA1` tensor container.
//!
//! Layout: the 5 magic bytes `MLSA1`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every tensor as raw little-endian `f64`
//! values in manifest order. Manifest offsets count bytes from the start of
//! the data section.

use std::path::Path;

use medlasa_core::adapters::{tensor_name, AdapterSite, WeightSelection};
use medlasa_core::editing::EditOutcome;
use medlasa_core::model::{MicroTransformer, ModelConfig, WeightName};
use medlasa_core::numerics::Matrix;
use medlasa_core::scaling::ScalePair;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 5] = b"MLSA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Model,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific extras; `null` for models.
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Serializes a header and tensors into container bytes.
pub fn encode(
    kind: CheckpointKind,
    config: &ModelConfig,
    tensors: &[(String, &Matrix)],
    meta: serde_json::Value,
) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset,
            };
            offset += 8 * m.len();
            e
        })
        .collect();
    let header = Header {
        kind,
        config: config.clone(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(13 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses container bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, Vec<(String, Matrix)>)> {
    let bad = |msg: &str| LabError::format(path, msg);
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad("not an MLSA1 checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| bad("header length overflows"))?;
    let data_start = 13usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[13..data_start]).map_err(|e| LabError::format(path, e))?;
    let data = &bytes[data_start..];
    let mut expected = 0usize;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected {
            return Err(bad("tensor offsets are not contiguous"));
        }
        let n = e.shape[0]
            .checked_mul(e.shape[1])
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("tensor size overflows"))?;
        let end = expected + n;
        let raw = data
            .get(expected..end)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let vals = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((e.name.clone(), Matrix::new(e.shape[0], e.shape[1], vals)?));
        expected = end;
    }
    if expected != data.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((header, tensors))
}

fn read(path: &Path, want: CheckpointKind) -> Result<(Header, Vec<(String, Matrix)>)> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    let (header, tensors) = decode(&bytes, path)?;
    if header.kind != want {
        return Err(LabError::format(
            path,
            format!("expected a {want:?} checkpoint"),
        ));
    }
    Ok((header, tensors))
}

pub fn model_bytes(model: &MicroTransformer) -> Vec<u8> {
    encode(
        CheckpointKind::Model,
        model.config(),
        &model.tensors(),
        serde_json::Value::Null,
    )
}

pub fn save_model(model: &MicroTransformer, path: &Path) -> Result<()> {
    write_atomic(path, &model_bytes(model))
}

pub fn load_model(path: &Path) -> Result<MicroTransformer> {
    let (header, tensors) = read(path, CheckpointKind::Model)?;
    MicroTransformer::from_tensors(header.config, tensors).map_err(|e| LabError::format(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteMeta {
    layer: usize,
    weight: WeightName,
    alpha: f64,
    rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterMeta {
    selection: WeightSelection,
    scales: ScalePair,
    sites: Vec<SiteMeta>,
    losses: Vec<f64>,
    steps: usize,
    trainable_parameters: usize,
}

/// Adapter tensors `layers.{l}.{W}.B` / `.A` plus scales and training
/// record; `config` is the base model's.
pub fn adapter_bytes(outcome: &EditOutcome, config: &ModelConfig) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(2 * outcome.sites.len());
    for s in &outcome.sites {
        tensors.push((tensor_name(s.layer, s.weight, 'B'), &s.b));
        tensors.push((tensor_name(s.layer, s.weight, 'A'), &s.a));
    }
    let meta = AdapterMeta {
        selection: outcome.selection.clone(),
        scales: outcome.scales.clone(),
        sites: outcome
            .sites
            .iter()
            .map(|s| SiteMeta {
                layer: s.layer,
                weight: s.weight,
                alpha: s.alpha,
                rank: s.rank,
            })
            .collect(),
        losses: outcome.losses.clone(),
        steps: outcome.steps,
        trainable_parameters: outcome.trainable_parameters,
    };
    let meta = serde_json::to_value(meta).expect("adapter meta serializes");
    encode(CheckpointKind::Adapter, config, &tensors, meta)
}

pub fn save_adapter(outcome: &EditOutcome, config: &ModelConfig, path: &Path) -> Result<()> {
    write_atomic(path, &adapter_bytes(outcome, config))
}

/// Loads an adapter checkpoint and checks it against `base`.
pub fn load_adapter(path: &Path, base: &MicroTransformer) -> Result<EditOutcome> {
    let (header, tensors) = read(path, CheckpointKind::Adapter)?;
    if &header.config != base.config() {
        return Err(LabError::format(
            path,
            "adapter was trained for a different model config",
        ));
    }
    let meta: AdapterMeta =
        serde_json::from_value(header.meta).map_err(|e| LabError::format(path, e))?;
    if tensors.len() != 2 * meta.sites.len() {
        return Err(LabError::format(
            path,
            "tensor count does not match the site list",
        ));
    }
    let mut sites = Vec::with_capacity(meta.sites.len());
    for (s, pair) in meta.sites.iter().zip(tensors.chunks_exact(2)) {
        let (bn, an) = (
            tensor_name(s.layer, s.weight, 'B'),
            tensor_name(s.layer, s.weight, 'A'),
        );
        if pair[0].0 != bn || pair[1].0 != an {
            return Err(LabError::format(
                path,
                format!("expected tensors {bn} and {an}"),
            ));
        }
        sites.push(AdapterSite {
            layer: s.layer,
            weight: s.weight,
            b: pair[0].1.clone(),
            a: pair[1].1.clone(),
            alpha: s.alpha,
            rank: s.rank,
        });
    }
    let outcome = EditOutcome {
        selection: meta.selection,
        scales: meta.scales,
        sites,
        losses: meta.losses,
        steps: meta.steps,
        trainable_parameters: meta.trainable_parameters,
    };
    // validates every site's shapes against the base
    outcome
        .adapted(base)
        .map_err(|e| LabError::format(path, e))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use medlasa_core::model::{LanguageModel, RunSpec};

    fn small() -> MicroTransformer {
        MicroTransformer::new(ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq: 8,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mlsa");
        let m = small();
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        for ((n1, a), (n2, b)) in m.tensors().iter().zip(back.tensors()) {
            assert_eq!(n1, &n2);
            let bits = |x: &Matrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let toks = [0, 3, 5, 7];
        let l1 = m.forward(&RunSpec::clean(&toks)).unwrap().logits;
        let l2 = back.forward(&RunSpec::clean(&toks)).unwrap().logits;
        assert_eq!(l1, l2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bytes = model_bytes(&small());
        let cases: [(&str, Vec<u8>); 4] = [
            ("truncated", bytes[..bytes.len() - 3].to_vec()),
            ("magic", [b"MLSA2", &bytes[5..]].concat()),
            ("short", bytes[..9].to_vec()),
            ("trailing", [bytes.as_slice(), &[0u8; 8]].concat()),
        ];
        for (name, b) in cases {
            let p = dir.path().join(name);
            std::fs::write(&p, b).unwrap();
            let err = load_model(&p).unwrap_err();
            assert!(matches!(err, LabError::Format { .. }), "{name}: {err}");
        }
    }

    #[test]
    fn shape_mismatch_is_a_format_error() {
        let m = small();
        let mut cfg = m.config().clone();
        cfg.d_ff = 16;
        let bytes = encode(
            CheckpointKind::Model,
            &cfg,
            &m.tensors(),
            serde_json::Value::Null,
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m");
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_model(&p).unwrap_err(),
            LabError::Format { .. }
        ));
    }
}
