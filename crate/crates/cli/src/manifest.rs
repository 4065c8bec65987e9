use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to replay a run and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub workers: usize,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl Manifest {
    pub fn new(
        subcommand: &str,
        argv: Vec<String>,
        seed: u64,
        workers: usize,
        paths: &[PathBuf],
    ) -> std::io::Result<Self> {
        let artifacts = paths
            .iter()
            .map(|p| {
                Ok(Artifact {
                    path: p.clone(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<std::io::Result<_>>()?;
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            argv,
            seed,
            workers,
            artifacts,
        })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("manifest serializes") + "\n",
        )
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)
    }

    /// Artifacts whose current contents no longer match the recorded hash.
    /// Relative paths resolve against `base`.
    pub fn mismatches(&self, base: &Path) -> Vec<PathBuf> {
        self.artifacts
            .iter()
            .filter(|a| {
                let p = if a.path.is_absolute() {
                    a.path.clone()
                } else {
                    base.join(&a.path)
                };
                sha256_file(&p).map_or(true, |h| h != a.sha256)
            })
            .map(|a| a.path.clone())
            .collect()
    }
}
