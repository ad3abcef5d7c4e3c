//! Per-iteration metrics as JSONL, with wall-clock times in a sidecar file so
//! the primary stream stays byte-deterministic.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synthdistill::distill::IterationResult;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub step1_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step2_loss: Option<f64>,
    pub sim_mean: f64,
    pub sim_min: f64,
    pub sim_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub wall_ms: f64,
}

impl From<&IterationResult> for MetricsRecord {
    fn from(r: &IterationResult) -> Self {
        Self {
            epoch: r.epoch,
            iteration: r.iteration,
            step1_loss: r.step1_loss,
            step2_loss: r.step2_loss,
            sim_mean: r.sim_mean,
            sim_min: r.sim_min,
            sim_max: r.sim_max,
        }
    }
}

/// The timing sidecar for a metrics file: `metrics.jsonl` → `metrics.timing.jsonl`.
pub fn timing_path(metrics: &Path) -> PathBuf {
    metrics.with_extension("timing.jsonl")
}

pub struct MetricsWriter {
    path: PathBuf,
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    flush_every: usize,
    pending: usize,
}

impl MetricsWriter {
    /// Starts fresh files, replacing any existing ones.
    pub fn create(path: &Path, flush_every: usize) -> Result<Self, CliError> {
        Self::open(path, flush_every, false)
    }

    /// Keeps the first `keep` records of an existing stream and appends after
    /// them. Used on resume, where records past the checkpoint are replayed.
    pub fn resume(path: &Path, keep: usize, flush_every: usize) -> Result<Self, CliError> {
        truncate_lines(path, keep)?;
        truncate_lines(&timing_path(path), keep)?;
        Self::open(path, flush_every, true)
    }

    fn open(path: &Path, flush_every: usize, append: bool) -> Result<Self, CliError> {
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map(BufWriter::new)
                .map_err(|e| CliError::io(p, e))
        };
        Ok(Self {
            path: path.to_path_buf(),
            metrics: open(path)?,
            timing: open(&timing_path(path))?,
            flush_every: flush_every.max(1),
            pending: 0,
        })
    }

    pub fn write(&mut self, r: &IterationResult) -> Result<(), CliError> {
        let line = serde_json::to_string(&MetricsRecord::from(r)).expect("record serializes");
        writeln!(self.metrics, "{line}").map_err(|e| CliError::io(&self.path, e))?;
        let timing = TimingRecord {
            epoch: r.epoch,
            iteration: r.iteration,
            wall_ms: r.wall.as_secs_f64() * 1e3,
        };
        let line = serde_json::to_string(&timing).expect("record serializes");
        writeln!(self.timing, "{line}").map_err(|e| CliError::io(&timing_path(&self.path), e))?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.pending = 0;
        self.metrics.flush().map_err(|e| CliError::io(&self.path, e))?;
        self.timing
            .flush()
            .map_err(|e| CliError::io(&timing_path(&self.path), e))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn truncate_lines(path: &Path, keep: usize) -> Result<(), CliError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if keep > 0 {
                log::warn!("{}: missing on resume; earlier records are lost", path.display());
            }
            return Ok(());
        }
        Err(e) => return Err(CliError::io(path, e)),
    };
    let mut kept = String::new();
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        if n == keep {
            break;
        }
        let line = line.map_err(|e| CliError::io(path, e))?;
        kept.push_str(&line);
        kept.push('\n');
        n += 1;
    }
    if n < keep {
        log::warn!("{}: holds {n} records, checkpoint is at {keep}", path.display());
    }
    fs::write(path, kept).map_err(|e| CliError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
