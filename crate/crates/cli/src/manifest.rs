//! Run manifest: written before a command does any work and finalized with
//! the files the run produced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use brts_core::TrainConfig;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Complete,
    Failed,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::Complete => "complete",
            Status::Failed => "failed",
        }
    }
}

pub struct Manifest {
    dir: PathBuf,
    command: &'static str,
    config: TrainConfig,
    gates: Vec<(String, String)>,
}

impl Manifest {
    /// Creates `dir` and writes the manifest with status `running`.
    pub fn begin(dir: &Path, command: &'static str, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let m = Self {
            dir: dir.to_path_buf(),
            command,
            config: config.clone(),
            gates: Vec::new(),
        };
        m.write(Status::Running, &[])?;
        Ok(m)
    }

    pub fn gate(&mut self, name: &str, value: impl ToString) {
        self.gates.push((name.to_string(), value.to_string()));
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    /// Records the final status and every file now in the output directory.
    pub fn finish(&self, status: Status) -> Result<()> {
        let files = produced_files(&self.dir)?;
        self.write(status, &files)
    }

    fn write(&self, status: Status, files: &[String]) -> Result<()> {
        let mut s = String::new();
        s.push_str(&format!("artifact_version = {}\n", env!("CARGO_PKG_VERSION")));
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str(&format!("seed = {}\n", self.config.seed));
        s.push_str(&format!("status = {}\n", status.as_str()));
        s.push_str("\n[config]\n");
        s.push_str(&self.config.to_kv_string());
        if !self.gates.is_empty() {
            s.push_str("\n[gates]\n");
            for (k, v) in &self.gates {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s.push_str("\n[files]\n");
        for f in files {
            s.push_str(f);
            s.push('\n');
        }
        let path = self.path();
        fs::write(&path, s).with_context(|| format!("cannot write {}", path.display()))
    }
}

/// Sorted names of the regular files in `dir`, excluding the manifest.
pub fn produced_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            let name = entry.file_name().to_string_lossy().into_owned();
            if name != MANIFEST {
                names.push(name);
            }
        }
    }
    names.sort();
    Ok(names)
}
