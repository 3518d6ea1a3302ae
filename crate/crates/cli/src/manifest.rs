use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use distildp::rng::{derive_seed, sha256_hex};
use serde::Serialize;

/// Labels under which per-phase seeds are derived from the root seed.
pub const SEED_LABELS: [&str; 10] = [
    "corpus",
    "split",
    "teacher-init",
    "teacher",
    "generation",
    "generation-codes",
    "generation-val",
    "generation-val-codes",
    "student-init",
    "student",
];

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one invocation: what went in, what came out, and with which
/// seeds. Contains no timestamps, so identical runs give identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_sha256: String,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub seeds: BTreeMap<String, u64>,
}

fn entry(path: &Path, shown: String) -> Result<FileEntry> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(FileEntry {
        path: shown,
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Collects written files and emits `manifest.json` next to them.
pub struct ManifestBuilder {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, out_dir: &Path, config_bytes: &[u8], root_seed: Option<u64>) -> Self {
        let seeds = root_seed
            .map(|root| {
                let mut m: BTreeMap<String, u64> = SEED_LABELS
                    .iter()
                    .map(|l| (l.to_string(), derive_seed(root, l)))
                    .collect();
                m.insert("root".into(), root);
                m
            })
            .unwrap_or_default();
        ManifestBuilder {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_sha256: sha256_hex(config_bytes),
                inputs: Vec::new(),
                outputs: Vec::new(),
                seeds,
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .inputs
            .push(entry(path, path.display().to_string())?);
        Ok(())
    }

    /// Writes `bytes` to `name` inside the output directory and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.outputs.push(entry(&path, name.to_string())?);
        Ok(path)
    }

    pub fn finish(self) -> Result<RunManifest> {
        let path = self.out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(self.manifest)
    }
}
