//! Single-file checkpoints.
//!
//! ```text
//! b"UMOCKPT1"                 magic
//! u64 LE                      header length in bytes
//! JSON header                 {"seed", "config", "tensors": [{"name", "shape", "trainable"}]}
//! f64 LE × Σ numel            tensor data in header order
//! [u8; 32]                    SHA-256 of everything above
//! ```
//!
//! Tensor names are the stable parameter names, e.g. `backbone.block0.attn.q.weight`,
//! `vision.pool`, `t2i.tok_emb`, `aux.block0.mlp.fc2.bias`, `backbone.block1.attn.v.lora_a`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::unimoco::UniMoCo;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"UMOCKPT1";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    seed: u64,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

pub fn encode_checkpoint(model: &UniMoCo) -> Vec<u8> {
    let store = model.params();
    let header = Header {
        seed: model.seed(),
        config: model.config().clone(),
        tensors: store
            .ids()
            .map(|id| Entry {
                name: store.name(id).to_string(),
                shape: store.get(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<UniMoCo> {
    let fail = |m: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message: m,
    };
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fail("checksum mismatch, file is corrupted".into()));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body
        .get(16..16 + header_len)
        .ok_or_else(|| fail("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| fail(format!("bad header: {e}")))?;
    let data = &body[16 + header_len..];
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if data.len() != total * 8 {
        return Err(fail(format!(
            "data section has {} bytes, header describes {}",
            data.len(),
            total * 8
        )));
    }
    let mut model = UniMoCo::new(header.config.clone(), header.seed)
        .map_err(|e| fail(format!("config rejected: {e}")))?;
    if model.params().len() != header.tensors.len() {
        return Err(fail(format!(
            "checkpoint has {} tensors, config builds {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    let mut offset = 0;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let values = data[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        let store = model.params_mut();
        let id = store
            .find(&entry.name)
            .ok_or_else(|| fail(format!("unexpected tensor `{}`", entry.name)))?;
        let tensor = Tensor::new(entry.shape.clone(), values).map_err(|e| fail(e.to_string()))?;
        store.assign(id, tensor).map_err(|e| {
            fail(format!("tensor `{}`: {e}", entry.name))
        })?;
        store.set_trainable(id, entry.trainable);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &UniMoCo, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<UniMoCo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::AdapterConfig;

    fn assert_same(a: &UniMoCo, b: &UniMoCo) {
        assert_eq!(a.config(), b.config());
        assert_eq!(a.params().len(), b.params().len());
        for id in a.params().ids() {
            assert_eq!(a.params().name(id), b.params().name(id));
            let (x, y) = (a.params().get(id).data(), b.params().get(id).data());
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
            assert_eq!(a.params().is_trainable(id), b.params().is_trainable(id));
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = UniMoCo::new(ModelConfig::default(), 3).unwrap();
        let id = m.params().find("backbone.ln_f.beta").unwrap();
        m.params_mut().get_mut(id).data_mut()[0] = 0.1 + 0.2;
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_same(&m, &back);
        assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn adapters_survive_round_trip() {
        let cfg = ModelConfig {
            adapters: Some(AdapterConfig::default()),
            ..ModelConfig::default()
        };
        let m = UniMoCo::new(cfg, 1).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&m), Path::new("x")).unwrap();
        assert_same(&m, &back);
    }

    #[test]
    fn corruption_is_detected() {
        let m = UniMoCo::new(ModelConfig::default(), 3).unwrap();
        let mut bytes = encode_checkpoint(&m);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = decode_checkpoint(&bytes, Path::new("c.ckpt")).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let err = decode_checkpoint(&bytes[..100], Path::new("c.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
        assert!(decode_checkpoint(b"garbage", Path::new("g")).is_err());
    }
}
