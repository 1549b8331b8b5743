//! Working-directory layout and its lock file.

use std::fs::OpenOptions;
use std::path::PathBuf;

use crate::error::CliError;

pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.mgt")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.checkpoints().join(format!("step_{step:07}.mgt"))
    }

    pub fn latest(&self) -> PathBuf {
        self.checkpoints().join("latest.mgt")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn toy(&self) -> PathBuf {
        self.root.join("toy")
    }

    /// Creates the directory and takes the lock; the lock is released when
    /// the guard drops.
    pub fn lock(&self) -> Result<LockGuard, CliError> {
        std::fs::create_dir_all(&self.root)?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "workdir {} is locked by another command; remove {} if no command is running",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let w = Workdir::new(dir.path().join("w"));
        let g = w.lock().unwrap();
        assert!(w.root.join(LOCK_FILE).exists());
        assert!(matches!(w.lock(), Err(CliError::Data(_))));
        drop(g);
        assert!(w.lock().is_ok());
    }
}
