use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Tracks the files a run reads and writes.
#[derive(Debug, Default)]
pub struct Artifacts {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Artifacts {
    pub fn input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    pub fn output(&mut self, path: PathBuf) -> PathBuf {
        self.outputs.push(path.clone());
        path
    }

    pub fn write_manifest(&self, out: &Path, subcommand: &str, config: &RunConfig) -> Result<()> {
        let digest = |p: &PathBuf, display: String| -> Result<FileDigest> {
            Ok(FileDigest {
                path: display,
                sha256: sha256_file(p)?,
            })
        };
        let inputs = self
            .inputs
            .iter()
            .map(|p| digest(p, p.display().to_string()))
            .collect::<Result<Vec<_>>>()?;
        // Outputs are named relative to the output directory so manifests
        // from different output locations compare equal.
        let outputs = self
            .outputs
            .iter()
            .map(|p| {
                let name = p.strip_prefix(out).unwrap_or(p).display().to_string();
                digest(p, name)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut echo = config.clone();
        echo.out = None;
        let manifest = Manifest {
            tool: "catchflux",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: config.seed(),
            config: &echo,
            inputs,
            outputs,
        };
        let path = out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, format!("{text}\n")).with_context(|| format!("cannot write {}", path.display()))
    }
}
