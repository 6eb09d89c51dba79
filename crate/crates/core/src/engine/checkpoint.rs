//! One JSON header line, then every array as raw little-endian f64 in header order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EngineError, Result, Tensor};

pub const CHECKPOINT_FORMAT: &str = "topicvae-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub arrays: Vec<ArraySpec>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// SHA-256 of the compact JSON form. Object keys serialize sorted, so equal
/// configs hash equally.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// truncated checkpoint under the final name.
pub fn save_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    meta: serde_json::Value,
    arrays: &[(&str, &Tensor)],
) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: config_hash(config),
        config: config.clone(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArraySpec {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, t) in arrays {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(EngineError::Checkpoint(format!("unknown format '{}'", header.format)));
    }
    if config_hash(&header.config) != header.config_hash {
        return Err(EngineError::Checkpoint(
            "config hash does not match stored config".into(),
        ));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for spec in &header.arrays {
        let n: usize = spec.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| EngineError::Checkpoint(format!("array '{}' truncated: {e}", spec.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((spec.name.clone(), Tensor::new(spec.shape.clone(), data)?));
    }
    let mut rest = [0u8; 1];
    if reader.read(&mut rest)? != 0 {
        return Err(EngineError::Checkpoint("trailing bytes after last array".into()));
    }
    Ok((header, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/3.ckpt");
        let a = Tensor::from_rows(&[vec![1.0, -0.0], vec![f64::MIN_POSITIVE, 1e300]]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let config = json!({"variant": "prod", "K": 10});
        save_checkpoint(&path, &config, json!({"epoch": 3}), &[("a", &a), ("b", &b)]).unwrap();
        let (header, arrays) = load_checkpoint(&path).unwrap();
        assert_eq!(header.config, config);
        assert_eq!(header.meta["epoch"], 3);
        assert_eq!(arrays[0], ("a".to_string(), a.clone()));
        assert_eq!(arrays[1].1, b);
        assert_eq!(arrays[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn hash_ignores_key_order_and_detects_edits() {
        let x: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":2}"#).unwrap();
        let y: serde_json::Value = serde_json::from_str(r#"{"b":2,"a":1}"#).unwrap();
        assert_eq!(config_hash(&x), config_hash(&y));
        assert_ne!(config_hash(&x), config_hash(&json!({"a": 1, "b": 3})));
        assert_eq!(config_hash(&x).len(), 64);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let a = Tensor::filled(&[4], 2.0);
        save_checkpoint(&path, &json!({}), json!(null), &[("a", &a)]).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
