//! Run manifest: configuration hash, seeds, version, timestamp and output
//! checksums.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episodic::SeedRoots;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub seeds: SeedRoots,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
    pub termination: String,
    pub episodes: usize,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

/// SHA-256 of the canonical TOML rendering of `value`. Tables render with
/// sorted keys, so the hash ignores field order in the source file.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = toml::Value::try_from(value).map_err(|e| Error::Config(format!("cannot canonicalize configuration: {e}")))?;
    let canonical = toml::to_string(&canonicalize(v)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(canonical.as_bytes()))
}

fn canonicalize(v: toml::Value) -> toml::Value {
    match v {
        toml::Value::Table(t) => {
            let sorted: BTreeMap<String, toml::Value> = t.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            toml::Value::Table(sorted.into_iter().collect())
        }
        toml::Value::Array(a) => toml::Value::Array(a.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_field_order() {
        let a: toml::Value = toml::from_str("x = 1\ny = 2\n[t]\nb = 'q'\na = [1, 2]\n").unwrap();
        let b: toml::Value = toml::from_str("[t]\na = [1, 2]\nb = 'q'\n").unwrap();
        let mut b = b;
        b.as_table_mut().unwrap().insert("y".into(), toml::Value::Integer(2));
        b.as_table_mut().unwrap().insert("x".into(), toml::Value::Integer(1));
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        let c: toml::Value = toml::from_str("x = 1\ny = 3\n[t]\nb = 'q'\na = [1, 2]\n").unwrap();
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
