//! Run manifests: resolved configuration, input and output checksums and
//! versions. No timestamps, so identical runs produce identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub library_version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Path → sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path → sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.manifest.json"))
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            library_version: aggcate::VERSION.into(),
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf, CliError> {
        let path = manifest_path(out, &self.command);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Numeric(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("manifest {}: {e}", path.display())))
    }
}

/// Refuse a fit report whose bytes, or whose recorded inputs, no longer
/// match the checksums in the fit manifest next to it.
pub fn check_fit_fresh(fit_path: &Path) -> Result<Manifest, CliError> {
    let dir = fit_path.parent().unwrap_or(Path::new("."));
    let mpath = manifest_path(dir, "fit");
    let manifest = Manifest::read(&mpath)?;
    let key = fit_path.display().to_string();
    let recorded = manifest
        .outputs
        .iter()
        .find(|(p, _)| *p == &key || Path::new(p).file_name() == fit_path.file_name())
        .map(|(_, h)| h.clone())
        .ok_or_else(|| CliError::Input(format!("stale fit: {} is not listed in {}", key, mpath.display())))?;
    if sha256_file(fit_path)? != recorded {
        return Err(CliError::Input(format!(
            "stale fit: {} does not match the checksum in {}; re-run `aggcate fit`",
            key,
            mpath.display()
        )));
    }
    for (input, hash) in &manifest.inputs {
        let p = Path::new(input);
        if p.exists() && &sha256_file(p)? != hash {
            return Err(CliError::Input(format!(
                "stale fit: input {input} changed since {} was written; re-run `aggcate fit`",
                key
            )));
        }
    }
    Ok(manifest)
}
