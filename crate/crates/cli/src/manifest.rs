use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use adanorm_core::data::sha256_hex;
use serde::Serialize;

use crate::CliError;

/// What a run read and wrote, with enough to rerun it.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub git_describe: String,
    pub seed: u64,
    pub threads: usize,
    /// Canonical config echo; rerunning with it reproduces the outputs.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: String) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            git_describe: git_describe(),
            seed,
            threads: rayon::current_num_threads(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), digest(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.insert(path.display().to_string(), digest(path)?);
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

pub fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(adanorm_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}
