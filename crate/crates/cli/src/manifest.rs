use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use scch_core::config::render_kv;
use scch_core::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.txt";

/// Record of one command invocation, written as `run_manifest.txt`.
pub struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    seed: Option<u64>,
    config: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
    started: Instant,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_path: None,
            seed: None,
            config: Vec::new(),
            artifacts: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn config_path(&mut self, p: Option<&Path>) {
        self.config_path = p.map(Path::to_path_buf);
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn settings(&mut self, pairs: impl IntoIterator<Item = (String, String)>) {
        self.config.extend(pairs);
    }

    pub fn artifact(&mut self, p: impl Into<PathBuf>) {
        self.artifacts.push(p.into());
    }

    pub fn artifacts(&mut self, ps: impl IntoIterator<Item = PathBuf>) {
        self.artifacts.extend(ps);
    }

    pub fn write(self, dir: &Path) -> Result<PathBuf> {
        let mut pairs = vec![("command".to_string(), self.command)];
        pairs.push((
            "config_path".into(),
            self.config_path.map_or("none".into(), |p| p.display().to_string()),
        ));
        pairs.push(("seed".into(), self.seed.map_or("none".into(), |s| s.to_string())));
        pairs.extend(self.config.into_iter().map(|(k, v)| (format!("config.{k}"), v)));
        for (i, a) in self.artifacts.iter().enumerate() {
            pairs.push((format!("artifact.{i}"), a.display().to_string()));
        }
        pairs.push((
            "wall_clock_seconds".into(),
            format!("{:.3}", self.started.elapsed().as_secs_f64()),
        ));
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, render_kv(pairs)).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
