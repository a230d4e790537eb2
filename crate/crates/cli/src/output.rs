//! Output directory handling: stable file names, the run manifest, and
//! per-stage timings (kept apart so manifests stay byte-reproducible).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Paths relative to the output directory, in write order.
    pub artifacts: Vec<String>,
    pub timings: &'static str,
}

#[derive(Debug, Serialize)]
struct StageTime {
    stage: String,
    seconds: f64,
}

/// JSON artifacts are wrapped so each names the manifest that produced it.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest: &'static str,
    config_hash: &'a str,
    body: &'a T,
}

pub struct Output {
    root: PathBuf,
    command: String,
    config_hash: String,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    stages: Vec<StageTime>,
}

impl Output {
    pub fn new(root: &Path, command: &str, config_hash: String, seeds: Vec<u64>) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Output {
            root: root.to_path_buf(),
            command: command.into(),
            config_hash,
            seeds,
            artifacts: Vec::new(),
            stages: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Registers an artifact written by other code.
    pub fn record(&mut self, rel: &str) {
        self.artifacts.push(rel.to_string());
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
        log::info!("stage {name}");
        let start = Instant::now();
        let out = f()?;
        self.stages.push(StageTime {
            stage: name.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, text)?;
        self.record(rel);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, body: &T) -> Result<(), CliError> {
        let stamped = Stamped {
            manifest: MANIFEST_FILE,
            config_hash: &self.config_hash,
            body,
        };
        let text = serde_json::to_string_pretty(&stamped)? + "\n";
        self.write_text(rel, &text)
    }

    pub fn write_report(&mut self, report: &fatigue_fusion::ExperimentReport) -> Result<(), CliError> {
        self.write_text("report.csv", &report.to_csv())?;
        let table = format!("# config {} (see {MANIFEST_FILE})\n{}", self.config_hash, report.to_table());
        self.write_text("report.txt", &table)?;
        self.write_json("report.json", report)?;
        print!("{}", report.to_table());
        Ok(())
    }

    pub fn finish(self) -> Result<(), CliError> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config_hash: self.config_hash,
            seeds: self.seeds,
            artifacts: self.artifacts,
            timings: TIMINGS_FILE,
        };
        fs::write(self.root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::write(self.root.join(TIMINGS_FILE), serde_json::to_string_pretty(&self.stages)? + "\n")?;
        Ok(())
    }
}
