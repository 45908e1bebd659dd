use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::job::Job;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

/// Record of one run. `config` holds everything the outputs depend on;
/// `threads`, `argv` and the timestamps are informational.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: Job,
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub status: Status,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl RunManifest {
    pub fn start(job: &Job, argv: Vec<String>) -> Self {
        Self {
            subcommand: job.name().to_string(),
            argv,
            config: job.clone(),
            seed: job.seed(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: Status::Running,
            error: None,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, outcome: &Result<Vec<PathBuf>, CliError>) {
        self.finished_unix_ms = Some(now_ms());
        match outcome {
            Ok(outputs) => {
                self.status = Status::Ok;
                self.outputs = outputs.clone();
            }
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e.to_string());
            }
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
