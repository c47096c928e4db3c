//! Run manifests: every command records its resolved configuration and a
//! content hash of each input file it read, so a run is reproducible from
//! the manifest alone.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub resolved_config: serde_json::Value,
    /// path -> "sha256:<hex>" for every input file read.
    pub input_hashes: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, out: &Path, resolved: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            out: out.to_path_buf(),
            resolved_config: resolved,
            input_hashes: Default::default(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> stclip::Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.input_hashes
            .insert(path.display().to_string(), format!("sha256:{hex}"));
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> stclip::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("run_manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}
