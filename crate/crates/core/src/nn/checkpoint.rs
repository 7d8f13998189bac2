//! Binary checkpoint container for one network.
//!
//! Layout: `ASLSRCK1`, a little-endian `u64` header length, a JSON header
//! (kind, spec, seed, tensor names and shapes), the tensors as little-endian
//! f64 in header order, and a trailing SHA-256 of everything before it.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ASLSRCK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: NetworkKind,
    /// Serialized network spec.
    pub spec: serde_json::Value,
    pub seed: u64,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: NetworkKind,
    spec: serde_json::Value,
    seed: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        kind: ck.kind,
        spec: ck.spec.clone(),
        seed: ck.seed,
        tensors: ck
            .params
            .iter()
            .map(|t| (t.name.clone(), t.value.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * ck.params.num_scalars() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in ck.params.iter() {
        for v in t.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + len).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    let mut data = &body[16 + len..];
    let mut params = ParamSet::new();
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        if data.len() < 8 * n {
            return Err(corrupt(&format!("tensor {name} is truncated")));
        }
        let (chunk, rest) = data.split_at(8 * n);
        data = rest;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("length checked");
        params.push(name, value);
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    Ok(Checkpoint {
        kind: header.kind,
        spec: header.spec,
        seed: header.seed,
        params,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Generator, GeneratorSpec};

    fn sample() -> Checkpoint {
        let g = Generator::new(
            GeneratorSpec {
                base_width: 2,
                zero_init_output: false,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        Checkpoint {
            kind: NetworkKind::Generator,
            spec: serde_json::to_value(g.spec()).unwrap(),
            seed: 5,
            params: g.params().clone(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.checksum(), ck.params.checksum());
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = encode(&sample());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = decode(Path::new("x.ckpt"), &bytes).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    }

    #[test]
    fn truncated_file_is_detected() {
        let bytes = encode(&sample());
        assert!(decode(Path::new("x.ckpt"), &bytes[..bytes.len() - 100]).is_err());
        assert!(decode(Path::new("x.ckpt"), b"short").is_err());
    }
}
