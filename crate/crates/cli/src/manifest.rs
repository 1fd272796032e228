use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{at, Result};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct Input {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Record of one subcommand run. No timestamps, so identical runs write
/// identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub master_seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<Input>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &'static str, master_seed: u64, config: &impl Serialize) -> Self {
        Self {
            tool: "probelab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            master_seed,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Records a file input; directories hash their sorted file contents.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        self.inputs.push(Input { role: role.to_string(), path: path.display().to_string(), sha256: hash_path(path)? });
        Ok(())
    }

    /// Records an input that was generated rather than read.
    pub fn generated(&mut self, role: &str, description: String, bytes: &[u8]) {
        self.inputs.push(Input {
            role: role.to_string(),
            path: description,
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let path = out.join(RUN_MANIFEST);
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, json + "\n").map_err(at(&path))?;
        Ok(path)
    }
}

pub fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(at(path))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(at(path))?;
        entries.sort();
        for p in entries.iter().filter(|p| p.is_file()) {
            h.update(p.file_name().expect("file name").to_string_lossy().as_bytes());
            h.update(std::fs::read(p).map_err(at(p))?);
        }
    } else {
        h.update(std::fs::read(path).map_err(at(path))?);
    }
    Ok(hex::encode(h.finalize()))
}
