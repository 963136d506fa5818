use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command: the resolved config, the hashes of
/// the files it read and a single hash over both.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
    pub content_hash: String,
    pub outputs: Vec<PathBuf>,
    pub results: serde_json::Value,
}

/// Hash of a file the way git hashes a blob: `blob <len>\0<bytes>`.
pub fn blob_hash(path: &Path) -> Result<String, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

/// Hashes of the data file and fold files named by the config; directories
/// contribute every file inside, in name order.
pub fn input_hashes(config: &RunConfig) -> Result<Vec<InputHash>, CliError> {
    let mut paths = Vec::new();
    if let Some(p) = &config.data.path {
        paths.push(p.clone());
    }
    if let Some(p) = &config.folds.path {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            paths.extend(files);
        } else {
            paths.push(p.clone());
        }
    }
    paths
        .into_iter()
        .map(|path| {
            Ok(InputHash {
                sha256: blob_hash(&path)?,
                path,
            })
        })
        .collect()
}

impl Manifest {
    pub fn new(
        command: &str,
        config: &RunConfig,
        inputs: Vec<InputHash>,
        outputs: Vec<PathBuf>,
        results: serde_json::Value,
    ) -> Self {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(config).expect("config serializes"));
        for input in &inputs {
            h.update(b"\0");
            h.update(input.sha256.as_bytes());
        }
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            config: config.clone(),
            inputs,
            content_hash: hex::encode(h.finalize()),
            outputs,
            results,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}
