//! Embedding checkpoints.
//!
//! Layout: the 8-byte magic `PSEGEMB1`, a little-endian `u32` length, that
//! many bytes of JSON metadata, then `token_capacity × embedding_dim`
//! little-endian `f32` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneDescriptor, PromptEmbeddings};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PSEGEMB1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub token_capacity: usize,
    pub embedding_dim: usize,
    pub backbone: BackboneDescriptor,
    pub config_hash: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a serializable configuration's canonical JSON.
pub fn config_hash(config: &serde_json::Value) -> String {
    sha256_hex(config.to_string().as_bytes())
}

pub fn encode_checkpoint(
    emb: &PromptEmbeddings,
    backbone: &BackboneDescriptor,
    config: &serde_json::Value,
) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        num_classes: emb.num_classes(),
        class_names: emb.class_names().to_vec(),
        token_capacity: emb.token_capacity(),
        embedding_dim: emb.embedding_dim(),
        backbone: backbone.clone(),
        config_hash: config_hash(config),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * emb.embeddings().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in emb.embeddings().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes via a temporary sibling file and rename.
pub fn save_embeddings(
    emb: &PromptEmbeddings,
    path: &Path,
    backbone: &BackboneDescriptor,
    config: &serde_json::Value,
) -> Result<String> {
    let bytes = encode_checkpoint(emb, backbone, config)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(PromptEmbeddings, CheckpointMeta)> {
    let parse = |detail: String| Error::Parse {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(parse("missing checkpoint magic".into()));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let meta_end = 12usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..meta_end])
        .map_err(|e| parse(format!("metadata: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(parse(format!("unsupported version {}", meta.version)));
    }
    let count = meta.token_capacity * meta.embedding_dim;
    let blob = &bytes[meta_end..];
    if blob.len() != 4 * count {
        return Err(parse(format!(
            "embedding blob has {} bytes, expected {}",
            blob.len(),
            4 * count
        )));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let array = Array2::from_shape_vec((meta.token_capacity, meta.embedding_dim), values)
        .map_err(|e| parse(e.to_string()))?;
    if meta.class_names.len() != meta.num_classes {
        return Err(parse("class name count does not match num_classes".into()));
    }
    let emb =
        PromptEmbeddings::new(array, meta.class_names.clone()).map_err(|e| parse(e.to_string()))?;
    Ok((emb, meta))
}

/// Reads a checkpoint without checking backbone compatibility.
pub fn read_checkpoint(path: &Path) -> Result<(PromptEmbeddings, CheckpointMeta, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (emb, meta) = decode_checkpoint(&bytes, path)?;
    Ok((emb, meta, sha256_hex(&bytes)))
}

pub fn check_compatible(meta: &CheckpointMeta, backbone: &BackboneDescriptor) -> Result<()> {
    let same = meta.backbone.identity() == backbone.identity()
        && meta.token_capacity == backbone.token_capacity
        && meta.embedding_dim == backbone.embedding_dim;
    if same {
        Ok(())
    } else {
        Err(Error::Compatibility {
            expected: backbone.identity(),
            found: meta.backbone.identity(),
        })
    }
}

/// Reads a checkpoint and verifies it was produced against `backbone`.
pub fn load_embeddings(path: &Path, backbone: &BackboneDescriptor) -> Result<PromptEmbeddings> {
    let (emb, meta, _) = read_checkpoint(path)?;
    check_compatible(&meta, backbone)?;
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{sd21_descriptor, Backbone, ToyBackbone};

    fn fixture() -> (PromptEmbeddings, ToyBackbone) {
        let bb = ToyBackbone::new(3);
        let names = vec!["bg".to_string(), "a".into(), "b".into()];
        let emb = bb.encode_prompt("RANDOM", &names, 11).unwrap();
        (emb, bb)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (emb, bb) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        let cfg = serde_json::json!({"lr": 0.1});
        save_embeddings(&emb, &path, bb.descriptor(), &cfg).unwrap();
        let back = load_embeddings(&path, bb.descriptor()).unwrap();
        assert_eq!(back, emb);
        let (_, meta, _) = read_checkpoint(&path).unwrap();
        assert_eq!(meta.num_classes, 3);
        assert_eq!(meta.config_hash, config_hash(&cfg));
        assert!(!dir.path().join("e.partial").exists());
    }

    #[test]
    fn truncation_is_parse_error() {
        let (emb, bb) = fixture();
        let bytes = encode_checkpoint(&emb, bb.descriptor(), &serde_json::Value::Null).unwrap();
        for cut in [0, 5, 20, bytes.len() - 1] {
            let r = decode_checkpoint(&bytes[..cut], Path::new("x"));
            assert!(matches!(r, Err(Error::Parse { .. })), "cut {cut}");
        }
    }

    #[test]
    fn foreign_backbone_is_rejected() {
        let (emb, bb) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ckpt");
        save_embeddings(&emb, &path, bb.descriptor(), &serde_json::Value::Null).unwrap();
        let sd = sd21_descriptor("abc".into());
        assert!(matches!(
            load_embeddings(&path, &sd),
            Err(Error::Compatibility { .. })
        ));
        let other = ToyBackbone::new(4);
        assert!(matches!(
            load_embeddings(&path, other.descriptor()),
            Err(Error::Compatibility { .. })
        ));
    }
}
