//! Run manifests: enough to rerun a command and get the same bytes back.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use neurank::config::KeyValues;
use neurank::io::write_atomic;
use serde::{Deserialize, Serialize};

pub const MANIFEST_EXT: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Arguments after the binary name, as given.
    pub args: Vec<String>,
    /// Directory relative paths in `args` are resolved against.
    pub working_dir: PathBuf,
    pub config_path: Option<PathBuf>,
    /// Every configuration key with its effective value. Empty for commands
    /// that take no configuration.
    pub config: KeyValues,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// `<primary output>.manifest.json`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    neurank::analysis::sidecar(primary, MANIFEST_EXT)
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, |w| writeln!(w, "{text}")).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}: not a run manifest", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            command: "bm25".into(),
            version: "0.1.0".into(),
            args: vec!["bm25".into(), "--depth".into(), "5".into()],
            working_dir: dir.path().to_path_buf(),
            config_path: None,
            config: KeyValues::from([("bm25_k1".into(), "0.9".into())]),
            seed: Some(3),
            inputs: BTreeMap::from([("corpus".into(), PathBuf::from("c.tsv"))]),
            outputs: vec![PathBuf::from("cands.tsv")],
        };
        let p = manifest_path(&dir.path().join("cands.tsv"));
        assert!(p.to_string_lossy().ends_with("cands.tsv.manifest.json"));
        m.save(&p).unwrap();
        assert_eq!(RunManifest::load(&p).unwrap(), m);
    }
}
