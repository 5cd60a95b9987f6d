//! Output directory layout, single-writer lock, and run metadata.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

const LOCK_FILE: &str = ".flowcal.lock";

pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn params(&self) -> PathBuf {
        self.root.join("params").join("wiener.json")
    }

    pub fn table(&self, kind: &str, resolution: usize) -> PathBuf {
        self.root.join(flowcal::CalibrationTable::<f64>::relative_path(kind, resolution, resolution))
    }

    pub fn samples(&self, kind: &str, resolution: usize, calibrated: bool) -> PathBuf {
        self.root.join("samples").join(kind).join(format!("{resolution}x{resolution}")).join(if calibrated {
            "calibrated"
        } else {
            "default"
        })
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }

    /// Takes the directory lock; released when the guard drops.
    pub fn lock(&self) -> Result<LockGuard, CliError> {
        std::fs::create_dir_all(&self.root)?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Busy(path)),
            Err(e) => Err(e.into()),
        }
    }

    /// Records the command, its resolved config, and a timestamp. The only
    /// file whose content varies between identical runs.
    pub fn record(&self, command: &str, config: &RunConfig) -> Result<(), CliError> {
        let path = self.root.join("metadata.json");
        let mut doc: Value = std::fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_else(|| json!({ "runs": {} }));
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        doc["runs"][command] = json!({
            "timestamp_unix": stamp,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
