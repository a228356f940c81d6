//! Run manifests, appended as JSON lines to `manifest.jsonl` in the
//! artifact directory of each run.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Wall-clock measurements. Kept apart from everything else so two runs
/// with the same inputs differ only here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix: f64,
    /// Seconds per named stage, in completion order.
    pub stages: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub checkpoint_hashes: BTreeMap<String, String>,
    pub denoiser_evaluations: BTreeMap<String, u64>,
    /// Free-form results of the run (losses, scores, written paths).
    pub outputs: serde_json::Value,
    pub timings: Timings,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            subcommand: subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds: BTreeMap::new(),
            checkpoint_hashes: BTreeMap::new(),
            denoiser_evaluations: BTreeMap::new(),
            outputs: serde_json::Value::Null,
            timings: Timings {
                started_unix: started,
                stages: Vec::new(),
            },
        }
    }

    /// Record how long `f` takes under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings
            .stages
            .push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    /// Append this manifest as one line of `dir/manifest.jsonl`.
    pub fn append_to(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let line = serde_json::to_string(self).map_err(std::io::Error::other)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        writeln!(f, "{line}")?;
        Ok(path)
    }
}

/// Every manifest recorded in `dir`, oldest first.
pub fn read_manifests(dir: &Path) -> std::io::Result<Vec<RunManifest>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
