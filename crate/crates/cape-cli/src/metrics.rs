//! Line-delimited metrics records with fixed keys.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: u64,
    pub split: String,
    pub category: String,
    pub pck: Option<f64>,
    pub heatmap_loss: Option<f64>,
    pub offset_loss: Option<f64>,
    pub total_loss: Option<f64>,
}

pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    /// Truncates unless `append`.
    pub fn open(path: &Path, append: bool) -> Result<MetricsWriter> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .with_context(|| format!("opening metrics file {}", path.display()))?;
        Ok(MetricsWriter { file })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.file, record)?;
        self.file.write_all(b"\n")?;
        Ok(())
    }
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading metrics {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("bad metrics line: {l}")))
        .collect()
}
