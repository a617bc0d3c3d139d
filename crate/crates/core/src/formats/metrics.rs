use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{Metrics, METRICS_HEADER};

/// Append-only metrics CSV. Opening at step `s` keeps the rows of earlier
/// steps and drops the rest, so a resumed run rewrites exactly what an
/// uninterrupted run would have.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    pub fn open(path: &Path, from_step: usize) -> Result<Self> {
        let mut text = format!("{METRICS_HEADER}\n");
        if from_step > 0 {
            let old = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in old.lines().skip(1) {
                let step: usize = line
                    .split(',')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad metrics row {line:?}")))?;
                if step < from_step {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, m: &Metrics) -> Result<()> {
        writeln!(self.file, "{}", m.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}
