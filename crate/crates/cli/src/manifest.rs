//! Run manifests: what was run, with which settings, and what it wrote.
//!
//! No timestamps or host details are recorded, so a rerun with the same
//! config produces a byte-identical manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub cohort: u64,
    pub registration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    /// The config as run, paths relative to the output directory.
    pub config: PipelineConfig,
    pub seeds: Seeds,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<OutputRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let io = |e| CliError::Io { path: dir.to_path_buf(), source: e };
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

impl Manifest {
    /// Hashes every file under `roots` (files or directories, relative to
    /// `config.out_dir`) in sorted path order.
    pub fn build(command: &str, config: &PipelineConfig, roots: &[&str]) -> Result<Self> {
        let out_dir = &config.out_dir;
        let mut files = Vec::new();
        for r in roots {
            let p = out_dir.join(r);
            if p.is_dir() {
                collect_files(&p, &mut files)?;
            } else if p.exists() {
                files.push(p);
            }
        }
        let mut outputs = files
            .iter()
            .map(|f| {
                let bytes = fs::read(f).map_err(|e| CliError::Io { path: f.clone(), source: e })?;
                let rel = f.strip_prefix(out_dir).unwrap_or(f);
                let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                Ok(OutputRecord { path, sha256: sha256_hex(&bytes) })
            })
            .collect::<Result<Vec<_>>>()?;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let versions = BTreeMap::from([
            ("mas-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("mas-core".to_string(), mas_core::VERSION.to_string()),
        ]);
        let portable = config.portable();
        Ok(Self {
            command: command.to_string(),
            config_sha256: sha256_hex(portable.canonical_json().as_bytes()),
            config: portable,
            seeds: Seeds { run: config.seed, cohort: config.cohort.seed, registration: config.registration.seed },
            versions,
            outputs,
        })
    }

    /// Writes `manifest_<command>.json` into the output directory.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("manifest_{}.json", self.command));
        let mut text = serde_json::to_vec_pretty(self).expect("manifest serializes");
        text.push(b'\n');
        mas_core::io::write_atomic(&path, &text)?;
        Ok(path)
    }
}
