//! Checkpoint container: a JSON header describing the network spec and
//! the parameter directory, followed by raw little-endian f64 payloads.
//! Loading refuses checkpoints whose embedded spec does not match the
//! expected one.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DiscriminatorSpec, GeneratorSpec, ParamKind, ParameterSet};

const MAGIC: &[u8; 8] = b"SFCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("header error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("spec mismatch: checkpoint holds a different {kind} spec")]
    SpecMismatch { kind: &'static str },
    #[error("checkpoint holds a {got} but a {expected} was expected")]
    WrongKind {
        got: &'static str,
        expected: &'static str,
    },
}

/// Which network a checkpoint stores, with its spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointKind {
    Generator {
        spec: GeneratorSpec,
    },
    Critic {
        spec: DiscriminatorSpec,
        input_height: usize,
        input_width: usize,
    },
}

impl CheckpointKind {
    fn name(&self) -> &'static str {
        match self {
            CheckpointKind::Generator { .. } => "generator",
            CheckpointKind::Critic { .. } => "critic",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    kind: CheckpointKind,
    step: u64,
    params: Vec<ParamEntry>,
}

/// Serializes a parameter set with its spec into checkpoint bytes.
pub fn encode_checkpoint(kind: &CheckpointKind, step: u64, params: &ParameterSet) -> Vec<u8> {
    let header = Header {
        kind: kind.clone(),
        step,
        params: params
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let payload_len: usize = params.params().iter().map(|p| p.values.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for p in params.params() {
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes into (kind, step, parameters).
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointKind, u64, ParameterSet), CheckpointError> {
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(CheckpointError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])?;
    let mut offset = 20 + header_len;
    let mut params = ParameterSet::new();
    for entry in &header.params {
        let count: usize = entry.shape.iter().product();
        let end = offset + count * 8;
        if bytes.len() < end {
            return Err(CheckpointError::Corrupt(format!(
                "truncated payload for {}",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(count);
        for i in 0..count {
            let raw: [u8; 8] = bytes[offset + i * 8..offset + (i + 1) * 8].try_into().unwrap();
            values.push(f64::from_le_bytes(raw));
        }
        params.add(&entry.name, entry.kind, entry.shape.clone(), values);
        offset = end;
    }
    Ok((header.kind, header.step, params))
}

pub fn save_checkpoint(
    path: &Path,
    kind: &CheckpointKind,
    step: u64,
    params: &ParameterSet,
) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(kind, step, params)).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointKind, u64, ParameterSet), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a generator checkpoint, refusing files whose embedded spec
/// differs from `expected` (when given).
pub fn load_generator_checkpoint(
    path: &Path,
    expected: Option<&GeneratorSpec>,
) -> Result<(GeneratorSpec, u64, ParameterSet), CheckpointError> {
    let (kind, step, params) = load_checkpoint(path)?;
    match kind {
        CheckpointKind::Generator { spec } => {
            if let Some(want) = expected {
                if &spec != want {
                    return Err(CheckpointError::SpecMismatch { kind: "generator" });
                }
            }
            Ok((spec, step, params))
        }
        other => Err(CheckpointError::WrongKind {
            got: other.name(),
            expected: "generator",
        }),
    }
}

/// Loads a critic checkpoint with the same spec-matching rule.
pub fn load_critic_checkpoint(
    path: &Path,
    expected: Option<&DiscriminatorSpec>,
) -> Result<(DiscriminatorSpec, usize, usize, u64, ParameterSet), CheckpointError> {
    let (kind, step, params) = load_checkpoint(path)?;
    match kind {
        CheckpointKind::Critic {
            spec,
            input_height,
            input_width,
        } => {
            if let Some(want) = expected {
                if &spec != want {
                    return Err(CheckpointError::SpecMismatch { kind: "critic" });
                }
            }
            Ok((spec, input_height, input_width, step, params))
        }
        other => Err(CheckpointError::WrongKind {
            got: other.name(),
            expected: "critic",
        }),
    }
}

/// Summary used by the `inspect` command.
pub fn describe_checkpoint(bytes: &[u8]) -> Result<String, CheckpointError> {
    let (kind, step, params) = decode_checkpoint(bytes)?;
    let mut out = String::new();
    out.push_str(&format!(
        "checkpoint: {} at step {step}\n",
        kind.name()
    ));
    out.push_str(&format!(
        "arrays: {}, learnable values: {}\n",
        params.len(),
        params.learnable_count()
    ));
    for p in params.params() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &p.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        out.push_str(&format!(
            "  {} {:?} [{:.4}, {:.4}]\n",
            p.name, p.shape, lo, hi
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_generator;

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = GeneratorSpec {
            depth: 1,
            base_channels: 4,
            ..Default::default()
        };
        let params = init_generator(&spec, 5).unwrap();
        let kind = CheckpointKind::Generator { spec: spec.clone() };
        let bytes = encode_checkpoint(&kind, 42, &params);
        let (kind2, step, params2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(kind, kind2);
        assert_eq!(step, 42);
        assert!(params.bit_identical(&params2));
    }

    #[test]
    fn spec_mismatch_is_refused() {
        let spec = GeneratorSpec {
            depth: 1,
            base_channels: 4,
            ..Default::default()
        };
        let params = init_generator(&spec, 5).unwrap();
        let tmp = tempfile::TempDir::new().unwrap();
        let path = tmp.path().join("g.ckpt");
        save_checkpoint(
            &path,
            &CheckpointKind::Generator { spec: spec.clone() },
            0,
            &params,
        )
        .unwrap();

        assert!(load_generator_checkpoint(&path, Some(&spec)).is_ok());
        let other = GeneratorSpec {
            depth: 2,
            ..spec.clone()
        };
        assert!(matches!(
            load_generator_checkpoint(&path, Some(&other)),
            Err(CheckpointError::SpecMismatch { .. })
        ));
        // Wrong kind.
        assert!(matches!(
            load_critic_checkpoint(&path, None),
            Err(CheckpointError::WrongKind { .. })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(
            decode_checkpoint(b"not a checkpoint at all......"),
            Err(CheckpointError::BadMagic)
        ));
    }
}
