//! Checkpoint directories: `manifest.json`, one little-endian blob and the run config.
//!
//! The manifest maps each array name to its shape, dtype and byte offset in
//! `blob.bin`; arrays are stored back to back in manifest order.

use std::fs;
use std::path::Path;

use lmcl_core::mining::{CohortBanks, MemoryBank};
use lmcl_core::nn::ParamStore;
use lmcl_core::train::{RngState, TrainConfig, TrainerState};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{LmclError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "blob.bin";
pub const CONFIG: &str = "config.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
}

impl Entry {
    fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub network: usize,
    pub stage: usize,
    pub capacity: usize,
    pub dim: usize,
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub blob: String,
    pub byte_order: String,
    pub entries: Vec<Entry>,
    pub iteration: u64,
    pub epoch: usize,
    pub rng: RngState,
    pub bank_next_tick: Option<u64>,
    pub banks: Vec<BankMeta>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<Entry>,
}

impl BlobWriter {
    fn f64s(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        self.entries.push(Entry {
            name,
            shape,
            dtype: Dtype::F64,
            offset: self.bytes.len() as u64,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn u64s(&mut self, name: String, data: &[u64]) {
        self.entries.push(Entry {
            name,
            shape: vec![data.len()],
            dtype: Dtype::U64,
            offset: self.bytes.len() as u64,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn store_entries(w: &mut BlobWriter, prefix: &str, store: &ParamStore) {
    for p in store.iter() {
        w.f64s(format!("{prefix}/{}", p.name), p.shape.clone(), &p.data);
    }
}

/// Writes `state` and `cfg` into `dir`, creating it if needed.
pub fn save(dir: &Path, cfg: &TrainConfig, state: &TrainerState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LmclError::io(dir, e))?;
    let mut w = BlobWriter::default();
    store_entries(&mut w, "theta", &state.theta);
    store_entries(&mut w, "gate", &state.gate_params);
    if let Some(pi) = &state.meta_params {
        store_entries(&mut w, "meta", pi);
    }
    for (p, v) in state.theta.iter().zip(&state.theta_velocity) {
        w.f64s(format!("velocity/theta/{}", p.name), p.shape.clone(), v);
    }
    for (p, v) in state.gate_params.iter().zip(&state.gate_velocity) {
        w.f64s(format!("velocity/gate/{}", p.name), p.shape.clone(), v);
    }
    let mut banks = Vec::new();
    if let Some(cb) = &state.banks {
        for m in 0..cb.networks() {
            for l in 0..cb.stages() {
                let b = cb.bank(m, l);
                w.f64s(format!("bank/{m}.{l}/values"), vec![b.len(), b.dim()], b.values());
                let labels: Vec<u64> = b.labels().iter().map(|&y| y as u64).collect();
                w.u64s(format!("bank/{m}.{l}/labels"), &labels);
                w.u64s(format!("bank/{m}.{l}/ticks"), b.ticks());
                banks.push(BankMeta {
                    network: m,
                    stage: l,
                    capacity: b.capacity(),
                    dim: b.dim(),
                    head: b.head(),
                });
            }
        }
    }
    let manifest = Manifest {
        blob: BLOB.into(),
        byte_order: "little".into(),
        entries: w.entries,
        iteration: state.iteration,
        epoch: state.epoch,
        rng: state.rng.clone(),
        bank_next_tick: state.banks.as_ref().map(CohortBanks::next_tick),
        banks,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &w.bytes).map_err(|e| LmclError::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| LmclError::io(&manifest_path, e))?;
    config::save(cfg, &dir.join(CONFIG))
}

struct BlobReader<'a> {
    dir: &'a Path,
    bytes: Vec<u8>,
}

impl BlobReader<'_> {
    fn bad(&self, detail: String) -> LmclError {
        LmclError::Checkpoint {
            path: self.dir.to_path_buf(),
            detail,
        }
    }

    fn raw(&self, e: &Entry, dtype: Dtype) -> Result<&[u8]> {
        if e.dtype != dtype {
            return Err(self.bad(format!("{} has dtype {:?}, expected {:?}", e.name, e.dtype, dtype)));
        }
        let start = e.offset as usize;
        let end = start + 8 * e.count();
        self.bytes
            .get(start..end)
            .ok_or_else(|| self.bad(format!("{} runs past the end of the blob", e.name)))
    }

    fn f64s(&self, e: &Entry) -> Result<Vec<f64>> {
        Ok(self
            .raw(e, Dtype::F64)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&self, e: &Entry) -> Result<Vec<u64>> {
        Ok(self
            .raw(e, Dtype::U64)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn find<'a>(entries: &'a [Entry], name: &str, dir: &Path) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| LmclError::Checkpoint {
            path: dir.to_path_buf(),
            detail: format!("missing array {name}"),
        })
}

/// Reads a checkpoint written by [`save`].
pub fn load(dir: &Path) -> Result<(TrainConfig, TrainerState)> {
    let cfg = config::load(&dir.join(CONFIG))?;
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| LmclError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| LmclError::Checkpoint {
        path: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let blob_path = dir.join(&manifest.blob);
    let reader = BlobReader {
        dir,
        bytes: fs::read(&blob_path).map_err(|e| LmclError::io(&blob_path, e))?,
    };
    let mut theta = ParamStore::new();
    let mut gates = ParamStore::new();
    let mut meta = ParamStore::new();
    let mut theta_velocity = Vec::new();
    let mut gate_velocity = Vec::new();
    for e in &manifest.entries {
        let (group, name) = e.name.split_once('/').unwrap_or(("", &e.name));
        match group {
            "theta" => drop(theta.add(name.into(), e.shape.clone(), reader.f64s(e)?)),
            "gate" => drop(gates.add(name.into(), e.shape.clone(), reader.f64s(e)?)),
            "meta" => drop(meta.add(name.into(), e.shape.clone(), reader.f64s(e)?)),
            "velocity" if name.starts_with("theta/") => theta_velocity.push(reader.f64s(e)?),
            "velocity" if name.starts_with("gate/") => gate_velocity.push(reader.f64s(e)?),
            "bank" => {}
            _ => return Err(reader.bad(format!("unexpected array {}", e.name))),
        }
    }
    let banks = match manifest.bank_next_tick {
        None => None,
        Some(next_tick) => {
            let networks = manifest.banks.iter().map(|b| b.network + 1).max().unwrap_or(0);
            let stages = manifest.banks.iter().map(|b| b.stage + 1).max().unwrap_or(0);
            let mut list = Vec::with_capacity(manifest.banks.len());
            for meta in &manifest.banks {
                let key = format!("bank/{}.{}", meta.network, meta.stage);
                let values = reader.f64s(find(&manifest.entries, &format!("{key}/values"), dir)?)?;
                let labels = reader.u64s(find(&manifest.entries, &format!("{key}/labels"), dir)?)?;
                let ticks = reader.u64s(find(&manifest.entries, &format!("{key}/ticks"), dir)?)?;
                let labels = labels.into_iter().map(|y| y as usize).collect();
                list.push(MemoryBank::from_parts(
                    meta.capacity,
                    meta.dim,
                    values,
                    labels,
                    ticks,
                    meta.head,
                )?);
            }
            Some(CohortBanks::from_parts(networks, stages, list, next_tick)?)
        }
    };
    let state = TrainerState {
        theta,
        gate_params: gates,
        meta_params: (!meta.is_empty()).then_some(meta),
        theta_velocity,
        gate_velocity,
        banks,
        rng: manifest.rng,
        iteration: manifest.iteration,
        epoch: manifest.epoch,
    };
    Ok((cfg, state))
}
