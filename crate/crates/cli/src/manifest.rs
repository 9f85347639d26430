use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Record of one CLI invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    /// Effective configuration in the config file grammar.
    pub config: String,
    pub config_path: Option<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_ms: u128,
    /// Named stage timings in seconds, plus `total`.
    pub timings_s: BTreeMap<String, f64>,
    pub exit_code: i32,
    pub error: Option<String>,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: String::new(),
            config_path: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            timings_s: BTreeMap::new(),
            exit_code: 0,
            error: None,
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings_s.insert(stage.to_string(), t.elapsed().as_secs_f64());
        out
    }

    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn finish(mut self, out_dir: &Path, exit_code: i32, error: Option<String>) -> std::io::Result<PathBuf> {
        self.exit_code = exit_code;
        self.error = error;
        self.timings_s.insert("total".into(), self.started.elapsed().as_secs_f64());
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(Self::file_name(&self.command));
        std::fs::write(&path, serde_json::to_string_pretty(&self).expect("manifest serializes") + "\n")?;
        Ok(path)
    }
}
