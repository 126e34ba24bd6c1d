//! CSV datasets: feature columns followed by one integer label column.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use lmcl_core::data::{gaussian_blobs, LabeledDataset, Split, TrainTest};
use lmcl_core::train::{DatasetSpec, TrainConfig};
use log::warn;

use crate::error::{LmclError, Result};

fn parse_err(path: &Path, line: u64, detail: impl Into<String>) -> LmclError {
    LmclError::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

/// Loads a CSV dataset. A first row with any non-numeric cell is a header.
/// Sparse label sets are remapped densely in ascending order.
pub fn load_csv(path: &Path, split: Split) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| LmclError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let numeric: Vec<Option<f64>> = record.iter().map(|c| c.parse::<f64>().ok()).collect();
        if i == 0 && numeric.iter().any(Option::is_none) {
            continue;
        }
        if record.len() < 2 {
            return Err(parse_err(path, line, "need at least one feature column and a label"));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(parse_err(path, line, format!("{} columns, expected {w}", record.len())));
            }
            _ => {}
        }
        for (j, v) in numeric.iter().enumerate() {
            if v.is_none() {
                return Err(parse_err(
                    path,
                    line,
                    format!("column {}: `{}` is not a number", j + 1, &record[j]),
                ));
            }
        }
        let label_cell = &record[record.len() - 1];
        let label: u64 = label_cell.parse().map_err(|_| {
            parse_err(
                path,
                line,
                format!("label `{label_cell}` is not a non-negative integer"),
            )
        })?;
        features.extend(numeric[..record.len() - 1].iter().map(|v| v.unwrap()));
        raw_labels.push(label);
    }
    let width = width.ok_or_else(|| parse_err(path, 0, "no data rows"))?;
    let distinct: BTreeMap<u64, usize> = {
        let mut set: Vec<u64> = raw_labels.clone();
        set.sort_unstable();
        set.dedup();
        set.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let max = *distinct.keys().last().unwrap();
    if max as usize + 1 != distinct.len() {
        warn!(
            "{}: labels {:?} are not contiguous; remapping to 0..{}",
            path.display(),
            distinct.keys().collect::<Vec<_>>(),
            distinct.len()
        );
    }
    let labels = raw_labels.iter().map(|l| distinct[l]).collect();
    Ok(LabeledDataset::new(features, width - 1, labels, distinct.len(), split)?)
}

/// Writes features with 17 significant digits, so `load_csv` reads back identical values.
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (i, y) in dataset.labels().iter().enumerate() {
        let mut row: Vec<String> = dataset.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| LmclError::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> LmclError {
    LmclError::io(path, std::io::Error::other(e.to_string()))
}

/// Loads a train/test pair of CSV files, which must agree in width and classes.
pub fn load_pair(train: &Path, test: &Path) -> Result<TrainTest> {
    let train = load_csv(train, Split::Train)?;
    let test = load_csv(test, Split::Test)?;
    if train.classes() != test.classes() || train.dim() != test.dim() {
        return Err(LmclError::Config(format!(
            "train ({} features, {} classes) and test ({} features, {} classes) disagree",
            train.dim(),
            train.classes(),
            test.dim(),
            test.classes()
        )));
    }
    Ok(TrainTest { train, test })
}

/// Builds the train/test pair a config describes.
pub fn load_dataset(cfg: &TrainConfig) -> Result<TrainTest> {
    match &cfg.dataset {
        DatasetSpec::Blobs(spec) => Ok(gaussian_blobs(spec, cfg.resolved_data_seed())?),
        DatasetSpec::Csv { train, test } => load_pair(Path::new(train), Path::new(test)),
    }
}
