//! Run directory layout: `config.snapshot`, `trace.jsonl`, `metrics.csv`,
//! `model.ckpt`, `accuracies.csv`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{self, FairnessReport, MetricsRow};
use crate::models::ModelParams;

use super::RoundTrace;

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const TRACE: &str = "trace.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const ACCURACIES: &str = "accuracies.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Writer for one run's output directory. The trace is streamed so a
/// diverged run keeps every completed round.
pub struct RunWriter {
    dir: PathBuf,
    trace: BufWriter<File>,
}

impl RunWriter {
    pub fn create(dir: &Path, config_snapshot: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snap = dir.join(CONFIG_SNAPSHOT);
        fs::write(&snap, config_snapshot).map_err(|e| Error::io(&snap, e))?;
        let trace = create(&dir.join(TRACE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            trace,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn push_trace(&mut self, trace: &RoundTrace) -> Result<()> {
        let path = self.dir.join(TRACE);
        let line = serde_json::to_string(trace).map_err(|e| Error::invalid(format!("trace encoding: {e}")))?;
        writeln!(self.trace, "{line}").map_err(|e| Error::io(&path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.dir.join(TRACE);
        self.trace.flush().map_err(|e| Error::io(path, e))
    }

    pub fn finish(
        mut self,
        run_id: &str,
        strategy: &str,
        seed: u64,
        params: &ModelParams,
        accuracies: &[f64],
        report: &FairnessReport,
    ) -> Result<()> {
        self.flush()?;
        write_metrics(
            &self.dir.join(METRICS),
            &[MetricsRow {
                run_id: run_id.to_string(),
                strategy: strategy.to_string(),
                seed,
                report: report.clone(),
            }],
        )?;
        let ckpt = self.dir.join(CHECKPOINT);
        let mut out = create(&ckpt)?;
        params
            .write_checkpoint(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&ckpt, e))?;
        let acc = self.dir.join(ACCURACIES);
        let mut out = create(&acc)?;
        metrics::write_accuracies(&mut out, accuracies)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&acc, e))
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = create(path)?;
    metrics::write_metrics_csv(&mut out, rows)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<metrics::MetricsRecord>> {
    metrics::read_metrics_csv(open(path)?, path)
}

pub fn read_accuracies(dir: &Path) -> Result<Vec<f64>> {
    let path = dir.join(ACCURACIES);
    metrics::read_accuracies(open(&path)?, &path)
}

pub fn read_checkpoint(dir: &Path) -> Result<ModelParams> {
    let path = dir.join(CHECKPOINT);
    ModelParams::read_checkpoint(open(&path)?, &path)
}

pub fn read_trace(dir: &Path) -> Result<Vec<RoundTrace>> {
    let path = dir.join(TRACE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
