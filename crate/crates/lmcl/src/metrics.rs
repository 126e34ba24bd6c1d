//! Per-epoch CSV outputs of a run.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use lmcl_core::train::{EpochRecord, LossBreakdown};

use crate::dataset::csv_io;
use crate::error::{LmclError, Result};

pub const METRICS: &str = "metrics.csv";
pub const LOSSES: &str = "losses.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const LAMBDA: &str = "lambda.csv";
pub const TIMING: &str = "timing.csv";

struct Sink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl Sink {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_io(&path, e))?;
        writer.write_record(header).map_err(|e| csv_io(&path, e))?;
        Ok(Sink { path, writer })
    }

    fn row(&mut self, cells: &[String]) -> Result<()> {
        self.writer.write_record(cells).map_err(|e| csv_io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| LmclError::io(&self.path, e))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `metrics.csv`, `losses.csv`, `diagnostics.csv`, `lambda.csv` and
/// `timing.csv`. Everything except timing is a pure function of the run.
pub struct MetricsWriter {
    metrics: Sink,
    losses: Sink,
    diagnostics: Sink,
    lambda: Sink,
    timing: Sink,
    last_epoch: usize,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| LmclError::io(dir, e))?;
        let mut loss_header = vec!["epoch"];
        loss_header.extend(LossBreakdown::NAMES);
        Ok(MetricsWriter {
            metrics: Sink::create(dir, METRICS, &["epoch", "net", "split", "accuracy"])?,
            losses: Sink::create(dir, LOSSES, &loss_header)?,
            diagnostics: Sink::create(dir, DIAGNOSTICS, &["epoch", "mi_bound", "hypergradient_norm", "lr"])?,
            lambda: Sink::create(
                dir,
                LAMBDA,
                &["epoch", "net_a", "net_b", "layer_a", "layer_b", "mean_lambda"],
            )?,
            timing: Sink::create(dir, TIMING, &["epoch", "wall_time_s"])?,
            last_epoch: 0,
        })
    }

    pub fn record(&mut self, r: &EpochRecord, wall_time_s: f64) -> Result<()> {
        if r.epoch <= self.last_epoch {
            return Err(LmclError::Config(format!(
                "epoch {} recorded after epoch {}",
                r.epoch, self.last_epoch
            )));
        }
        self.last_epoch = r.epoch;
        let e = r.epoch.to_string();
        for (split, acc) in [("train", &r.train_accuracy), ("test", &r.test_accuracy)] {
            for (net, a) in acc.iter().enumerate() {
                self.metrics
                    .row(&[e.clone(), net.to_string(), split.into(), a.to_string()])?;
            }
        }
        let mut row = vec![e.clone()];
        row.extend(r.losses.values().iter().map(f64::to_string));
        self.losses.row(&row)?;
        self.diagnostics
            .row(&[e.clone(), opt(r.mi_bound), opt(r.hypergradient_norm), r.lr.to_string()])?;
        for (p, v) in &r.lambda {
            self.lambda.row(&[
                e.clone(),
                p.a.to_string(),
                p.b.to_string(),
                p.la.to_string(),
                p.lb.to_string(),
                v.to_string(),
            ])?;
        }
        self.timing.row(&[e, format!("{wall_time_s:.3}")])?;
        for s in [
            &mut self.metrics,
            &mut self.losses,
            &mut self.diagnostics,
            &mut self.lambda,
            &mut self.timing,
        ] {
            s.flush()?;
        }
        Ok(())
    }
}

/// Final-stage normalized embeddings of every network with labels.
pub fn write_embeddings(path: &Path, per_network: &[Vec<f64>], dim: usize, labels: &[usize]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LmclError::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header = vec!["net".to_string(), "label".to_string()];
    header.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (net, values) in per_network.iter().enumerate() {
        for (row, y) in values.chunks(dim).zip(labels) {
            let mut cells = vec![net.to_string(), y.to_string()];
            cells.extend(row.iter().map(f64::to_string));
            w.write_record(&cells).map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| LmclError::io(path, e))
}
