use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

/// Provenance record written next to every output artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub toolkit_version: &'static str,
    pub subcommand: &'static str,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl RunManifest {
    pub fn start(subcommand: &'static str, config: impl Serialize) -> Self {
        Self {
            toolkit_version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
            started_unix_s: unix_now(),
            finished_unix_s: 0.0,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(&mut self, p: &Path) -> &mut Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(&mut self, p: &Path) -> &mut Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    /// Writes `<dir>/<subcommand>.manifest.json`.
    pub fn finish_in(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix_s = unix_now();
        let path = dir.join(format!("{}.manifest.json", self.subcommand));
        write_atomic(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }

    /// Writes `<artifact>.manifest.json` beside a single-file artifact.
    pub fn finish_beside(mut self, artifact: &Path) -> Result<PathBuf> {
        self.finished_unix_s = unix_now();
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = artifact.with_file_name(name);
        write_atomic(&path, serde_json::to_string_pretty(&self)?.as_bytes())?;
        Ok(path)
    }
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
