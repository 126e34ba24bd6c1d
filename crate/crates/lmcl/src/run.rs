//! Run driver: training with outputs, checkpoint evaluation, probing and export.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lmcl_core::data::{LabeledDataset, TrainTest};
use lmcl_core::probe::{linear_probe, ProbeConfig, ProbeResult};
use lmcl_core::train::{best_network, EpochRecord, TrainConfig, Trainer};
use log::info;
use serde::Serialize;

use crate::checkpoint;
use crate::config;
use crate::dataset::load_dataset;
use crate::error::{LmclError, Result};
use crate::metrics::{write_embeddings, MetricsWriter};

/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_ENV: &str = "LMCL_OUTPUT_ROOT";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EMBEDDINGS_DIR: &str = "embeddings";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Resolves a run directory: absolute paths as given, relative ones under the output root.
pub fn run_dir(name: &Path) -> PathBuf {
    if name.is_absolute() {
        name.to_path_buf()
    } else {
        output_root().join(name)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub best_network: usize,
    pub best_test_accuracy: f64,
    pub test_accuracy: Vec<f64>,
    pub wall_time_s: f64,
}

pub struct RunOutput {
    pub records: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub trainer: Trainer,
}

fn export_epoch(trainer: &Trainer, dir: &Path, epoch: usize) -> Result<()> {
    let test = trainer.test_set();
    let per_network = (0..trainer.cohort.size())
        .map(|m| Ok(trainer.final_embeddings(m, test)?.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(EMBEDDINGS_DIR).join(format!("epoch_{epoch:03}.csv"));
    write_embeddings(&path, &per_network, trainer.config().embed_dim, test.labels())
}

/// Trains `cfg` on `data`, writing the resolved config, metrics CSVs,
/// optional embeddings and a final checkpoint into `dir`.
pub fn train_with_data(cfg: &TrainConfig, data: TrainTest, dir: &Path) -> Result<RunOutput> {
    fs::create_dir_all(dir).map_err(|e| LmclError::io(dir, e))?;
    config::save(cfg, &dir.join(checkpoint::CONFIG))?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let mut writer = MetricsWriter::create(dir)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    while trainer.epoch() < cfg.epochs {
        let r = trainer.train_epoch()?;
        let elapsed = start.elapsed().as_secs_f64();
        writer.record(&r, elapsed)?;
        info!(
            "epoch {:>3}  loss {:.4}  test acc {:?}  ({elapsed:.1}s)",
            r.epoch, r.losses.total, r.test_accuracy
        );
        if cfg.export_embeddings {
            export_epoch(&trainer, dir, r.epoch)?;
        }
        records.push(r);
    }
    checkpoint::save(&dir.join(CHECKPOINT_DIR), cfg, &trainer.state())?;
    let test_accuracy = records.last().map(|r| r.test_accuracy.clone()).unwrap_or_default();
    let best = best_network(&test_accuracy);
    let summary = RunSummary {
        epochs: records.len(),
        best_network: best,
        best_test_accuracy: test_accuracy.get(best).copied().unwrap_or(f64::NAN),
        test_accuracy,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let path = dir.join("summary.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )
    .map_err(|e| LmclError::io(&path, e))?;
    Ok(RunOutput {
        records,
        summary,
        trainer,
    })
}

pub fn train(cfg: &TrainConfig, dir: &Path) -> Result<RunOutput> {
    train_with_data(cfg, load_dataset(cfg)?, dir)
}

/// Rebuilds the trainer a checkpoint was saved from.
pub fn restore(checkpoint_dir: &Path) -> Result<Trainer> {
    let (cfg, state) = checkpoint::load(checkpoint_dir)?;
    let data = load_dataset(&cfg)?;
    let mut trainer = Trainer::new(cfg, data)?;
    trainer.load_state(state)?;
    Ok(trainer)
}

/// Per-network test accuracy of a checkpoint, through the stripped inference graph.
pub fn evaluate(checkpoint_dir: &Path) -> Result<Vec<f64>> {
    let trainer = restore(checkpoint_dir)?;
    let (x, labels) = trainer.test_set().all()?;
    let theta = trainer.cohort.theta.clone();
    trainer
        .cohort
        .networks
        .iter()
        .map(|net| Ok(lmcl_core::train::accuracy(&net.strip(&theta).logits(&x)?, &labels)))
        .collect()
}

/// Linear probe on the frozen final-stage features of network `net`
/// (the best one on the test split when `None`).
pub fn probe(
    checkpoint_dir: &Path,
    transfer: Option<&TrainTest>,
    net: Option<usize>,
    cfg: &ProbeConfig,
) -> Result<(usize, ProbeResult)> {
    let trainer = restore(checkpoint_dir)?;
    let m = match net {
        Some(m) if m < trainer.cohort.size() => m,
        Some(m) => return Err(LmclError::Config(format!("network {m} outside the cohort"))),
        None => trainer.best_network(trainer.test_set())?.0,
    };
    let (train, test): (&LabeledDataset, &LabeledDataset) = match transfer {
        Some(t) => (&t.train, &t.test),
        None => (trainer.train_set(), trainer.test_set()),
    };
    let theta = trainer.cohort.theta.bind(None);
    let features = |d: &LabeledDataset| -> Result<(lmcl_core::Tensor, Vec<usize>)> {
        let (x, y) = d.all()?;
        Ok((trainer.cohort.networks[m].extract(&theta, &x)?, y))
    };
    let (tx, ty) = features(train)?;
    let (vx, vy) = features(test)?;
    Ok((m, linear_probe(&tx, &ty, &vx, &vy, train.classes(), cfg)?))
}

/// Writes final-stage test embeddings of a checkpoint to `out`.
pub fn export_embeddings(checkpoint_dir: &Path, out: &Path) -> Result<()> {
    let trainer = restore(checkpoint_dir)?;
    let test = trainer.test_set();
    let per_network = (0..trainer.cohort.size())
        .map(|m| Ok(trainer.final_embeddings(m, test)?.data().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    write_embeddings(out, &per_network, trainer.config().embed_dim, test.labels())
}
