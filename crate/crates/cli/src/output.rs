//! Run directory handling: clobber checks and file emission.

use std::fs;
use std::path::{Path, PathBuf};

use fgu_core::eval::MetricsReport;
use fgu_core::{FguError, Result};
use serde::Serialize;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `root`, refusing a non-empty existing directory unless
    /// `overwrite` is set.
    pub fn create(root: &Path, overwrite: bool) -> Result<Self> {
        if root.exists() {
            let occupied = match fs::read_dir(root) {
                Ok(mut entries) => entries.next().is_some(),
                Err(e) => return Err(FguError::io(root, e)),
            };
            if occupied && !overwrite {
                return Err(FguError::InvalidArgument(format!(
                    "output directory {} is not empty; pass --overwrite to replace its contents",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(root).map_err(|e| FguError::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Removes a subdirectory left by an earlier run so stale files never mix
    /// with fresh ones.
    pub fn fresh_dir(&self, rel: &str) -> Result<PathBuf> {
        let dir = self.path(rel);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| FguError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| FguError::io(&dir, e))?;
        Ok(dir)
    }

    pub fn write_json<S: Serialize + ?Sized>(&self, rel: &str, value: &S) -> Result<()> {
        let path = self.path(rel);
        let text = serde_json::to_string_pretty(value).map_err(|e| FguError::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| FguError::io(&path, e))
    }

    pub fn write_report(&self, report: &MetricsReport) -> Result<()> {
        self.write_json("report.json", report)?;
        let path = self.path("metrics.csv");
        fs::write(&path, report.to_csv()).map_err(|e| FguError::io(&path, e))
    }
}
