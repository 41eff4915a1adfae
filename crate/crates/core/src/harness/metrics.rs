//! Append-only training metrics. `metrics.csv` carries only deterministic
//! columns so equal-seed runs produce byte-identical files; wall-clock
//! times go to a separate `timings.csv`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::StageError;

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub eval_error_deg: Option<f64>,
    pub tag: String,
    pub wall_ms: u128,
}

pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
    pub metrics_path: PathBuf,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self, StageError> {
        std::fs::create_dir_all(dir)?;
        let metrics_path = dir.join("metrics.csv");
        let mut metrics = BufWriter::new(File::create(&metrics_path)?);
        writeln!(metrics, "iteration,train_loss,eval_error_deg,tag")?;
        let mut timings = BufWriter::new(File::create(dir.join("timings.csv"))?);
        writeln!(timings, "iteration,wall_ms")?;
        Ok(MetricsWriter { metrics, timings, metrics_path })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> Result<(), StageError> {
        let eval = r.eval_error_deg.map(|e| e.to_string()).unwrap_or_default();
        writeln!(self.metrics, "{},{},{},{}", r.iteration, r.train_loss, eval, r.tag)?;
        writeln!(self.timings, "{},{}", r.iteration, r.wall_ms)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), StageError> {
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}
