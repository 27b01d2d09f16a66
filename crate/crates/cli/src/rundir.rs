//! Run directories named `<UTC timestamp>-<command>-<config hash>`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const RUN_ROOT_ENV: &str = "HOI_RUN_ROOT";

/// First 12 hex digits of the SHA-256 of the value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes))[..12].to_string())
}

/// Creates a fresh run directory under `root` and writes `config.json`.
pub fn create<T: Serialize>(root: &Path, command: &str, config: &T) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let hash = config_hash(config)?;
    let mut dir = root.join(format!("{stamp}-{command}-{hash}"));
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = root.join(format!("{stamp}-{command}-{hash}-{n}"));
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    write_json(&dir.join("config.json"), config)?;
    Ok(dir)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    std::fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn directories_do_not_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create(root.path(), "train", &1).unwrap();
        let b = create(root.path(), "train", &1).unwrap();
        assert_ne!(a, b);
        assert!(a.join("config.json").exists());
    }
}
