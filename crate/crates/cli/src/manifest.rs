//! The manifest every run writes before doing anything else and rewrites when it ends.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub tool_version: String,
    /// Milliseconds since the Unix epoch.
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
    /// `running`, `ok`, or `failed`.
    pub status: String,
    pub exit_code: Option<i32>,
    /// Every resolved key, enough to replay the run.
    pub config: BTreeMap<String, String>,
    /// Files written by the run, relative to `output_dir`.
    pub outputs: Vec<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config_path: Option<PathBuf>,
        master_seed: u64,
        output_dir: PathBuf,
        config: BTreeMap<String, String>,
    ) -> Self {
        RunManifest {
            subcommand: subcommand.to_owned(),
            config_path,
            master_seed,
            output_dir,
            tool_version: TOOL_VERSION.to_owned(),
            started_ms: now_ms(),
            finished_ms: None,
            status: "running".into(),
            exit_code: None,
            config,
            outputs: vec![],
        }
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    /// Writes through a temporary file so readers never see a partial manifest.
    pub fn write(&self) -> Result<(), CliError> {
        let tmp = self.output_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(&tmp, self.path())?;
        Ok(())
    }

    pub fn finish(&mut self, exit_code: i32) -> Result<(), CliError> {
        self.finished_ms = Some(now_ms());
        self.status = if exit_code == 0 { "ok" } else { "failed" }.into();
        self.exit_code = Some(exit_code);
        self.outputs.sort();
        self.outputs.dedup();
        self.write()
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
