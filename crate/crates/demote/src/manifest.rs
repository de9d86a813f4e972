//! Run manifests: every CLI command appends one JSON record to
//! `manifest.jsonl` next to its primary output, carrying enough to
//! reproduce the run (config echo, seeds, input hashes) and to identify
//! what it produced (output paths, checkpoint content hash).

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    /// Input path -> sha256 of the file bytes.
    pub data_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    /// Content hash of the produced checkpoint parameters, when one exists.
    pub checkpoint_hash: Option<String>,
}

/// Sha256 of a file's bytes, for the manifest's data-hash table.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

/// Appends the manifest as one line of `manifest.jsonl` in `dir`.
pub fn append_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = dir.join("manifest.jsonl");
    let mut line = serde_json::to_string(manifest)
        .map_err(|e| Error::validation(format!("manifest serialization failed: {e}")))?;
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    file.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_append_one_line_per_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest {
            command: "gen-data".into(),
            config: BTreeMap::new(),
            data_hashes: BTreeMap::new(),
            seed: Some(1),
            started_at: now_rfc3339(),
            finished_at: now_rfc3339(),
            outputs: vec!["data.jsonl".into()],
            checkpoint_hash: None,
        };
        let path = append_manifest(dir.path(), &manifest).unwrap();
        append_manifest(dir.path(), &manifest).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let parsed: RunManifest = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(parsed.command, "gen-data");
    }

    #[test]
    fn file_hash_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        std::fs::write(&path, "hello").unwrap();
        let a = file_hash(&path).unwrap();
        let b = file_hash(&path).unwrap();
        assert_eq!(a, b);
        assert!(file_hash(&dir.path().join("missing")).is_err());
    }
}
