use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{run, ExperimentConfig, Subcommand};
use crate::error::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const MANIFEST: &str = "manifest.json";

/// Data files of one run, held in memory until they are written.
#[derive(Clone, Debug)]
pub struct OutputSet {
    /// `(file name, contents)`, in write order; the last one is `report.json`.
    pub files: Vec<(String, Vec<u8>)>,
    pub report: Value,
    /// Human-readable summary for the terminal.
    pub lines: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subcommand: Subcommand,
    /// The configuration as run, with the effective seed.
    pub config: ExperimentConfig,
    pub seed: u64,
    pub code_version: String,
    pub wall_time_seconds: f64,
    pub threads: usize,
    /// Data files relative to the manifest.
    pub files: Vec<String>,
}

/// Removes what it wrote unless disarmed.
struct Cleanup {
    written: Vec<PathBuf>,
    created_dir: Option<PathBuf>,
    armed: bool,
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if !self.armed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if let Some(d) = &self.created_dir {
            let _ = fs::remove_dir(d);
        }
    }
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8], guard: &mut Cleanup) -> Result<()> {
    let tmp = dir.join(format!(".{name}.partial"));
    let dst = dir.join(name);
    guard.written.push(tmp.clone());
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &dst)?;
    guard.written.pop();
    guard.written.push(dst);
    Ok(())
}

/// Runs `cmd` and writes its data files and a manifest into `out`. On any
/// error the files written so far (and `out`, if this call created it) are removed.
pub fn run_to_dir(cmd: Subcommand, cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<(Manifest, OutputSet)> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate(cmd)?;
    let existed = out.exists();
    if existed && !out.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", out.display())));
    }
    let mut guard = Cleanup { written: vec![], created_dir: None, armed: true };
    if !existed {
        fs::create_dir_all(out)?;
        guard.created_dir = Some(out.to_path_buf());
    }
    let threads = crate::mc::thread_count().min(cfg.threads.unwrap_or(usize::MAX));
    let start = Instant::now();
    let set = run(cmd, &cfg, cfg.seed)?;
    let wall = start.elapsed().as_secs_f64();
    for (name, bytes) in &set.files {
        write_atomic(out, name, bytes, &mut guard)?;
    }
    let manifest = Manifest {
        subcommand: cmd,
        seed: cfg.seed,
        config: cfg,
        code_version: CODE_VERSION.to_string(),
        wall_time_seconds: wall,
        threads,
        files: set.files.iter().map(|f| f.0.clone()).collect(),
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    write_atomic(out, MANIFEST, &text, &mut guard)?;
    guard.armed = false;
    Ok((manifest, set))
}

/// Reads `path`, or `path/manifest.json` when `path` is a directory.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayReport {
    pub subcommand: Subcommand,
    pub identical: Vec<String>,
    pub differing: Vec<String>,
    pub missing: Vec<String>,
}

impl ReplayReport {
    pub fn bit_identical(&self) -> bool {
        self.differing.is_empty() && self.missing.is_empty()
    }
}

/// Reruns the manifest at `path` in memory and compares every data file it
/// lists with the one stored next to it.
pub fn replay(path: &Path) -> Result<ReplayReport> {
    let m = read_manifest(path)?;
    let dir = if path.is_dir() { path.to_path_buf() } else { path.parent().map_or_else(PathBuf::new, Path::to_path_buf) };
    let set = run(m.subcommand, &m.config, m.seed)?;
    let mut rep = ReplayReport { subcommand: m.subcommand, identical: vec![], differing: vec![], missing: vec![] };
    for name in &m.files {
        let fresh = set.files.iter().find(|f| &f.0 == name);
        match (fs::read(dir.join(name)), fresh) {
            (Ok(stored), Some((_, bytes))) if &stored == bytes => rep.identical.push(name.clone()),
            (Ok(_), Some(_)) => rep.differing.push(name.clone()),
            _ => rep.missing.push(name.clone()),
        }
    }
    Ok(rep)
}
