use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ser_refine::trainer::{LogLine, TrainConfig};
use ser_refine::{Error, Result};

use crate::VERSION;

/// A directory holding everything needed to reproduce one run: the
/// effective config, its seed, the tool version and the training log.
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let dir = Self { path: path.to_path_buf() };
        dir.write("config.txt", &cfg.to_text())?;
        dir.write("seed.txt", &format!("{}\n", cfg.seed))?;
        dir.write("version.txt", &format!("{VERSION}\n"))?;
        Ok(dir)
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn write_log(&self, log: &[LogLine]) -> Result<()> {
        let mut s = String::new();
        for line in log {
            let _ = writeln!(s, "{}", line.to_json());
        }
        self.write("log.jsonl", &s)
    }
}
