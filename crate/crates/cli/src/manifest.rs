//! Run manifest: what ran, with which resolved config, and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use scorefpe::Config;
use serde_json::{json, Map, Value};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved.cfg";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub seed: u64,
    pub threads: Option<usize>,
    pub started: f64,
    pub finished: Option<f64>,
    pub artifacts: Vec<PathBuf>,
    /// `running`, `ok`, or `failed`.
    pub status: String,
    pub error: Option<String>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn start(command: &str, config: Config, seed: u64, threads: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            threads,
            started: unix_now(),
            finished: None,
            artifacts: Vec::new(),
            status: "running".into(),
            error: None,
        }
    }

    pub fn finish(&mut self, error: Option<String>) {
        self.finished = Some(unix_now());
        self.status = if error.is_some() { "failed" } else { "ok" }.into();
        self.error = error;
    }

    pub fn to_json(&self) -> Value {
        let config: Map<String, Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.to_string(), Value::String(v.to_string())))
            .collect();
        json!({
            "command": self.command,
            "config": config,
            "seed": self.seed,
            "threads": self.threads,
            "started_unix": self.started,
            "finished_unix": self.finished,
            "artifacts": self.artifacts.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "status": self.status,
            "error": self.error,
            "version": env!("CARGO_PKG_VERSION"),
        })
    }

    /// Writes `manifest.json` and `resolved.cfg` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(std::io::Error::other)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        fs::write(dir.join(RESOLVED_CONFIG_FILE), self.config.to_string())
    }
}
