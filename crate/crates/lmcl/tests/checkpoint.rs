use std::fs;

use lmcl::checkpoint::{self, MANIFEST};
use lmcl::run;
use lmcl::LmclError;
use lmcl_core::data::{gaussian_blobs, BlobSpec};
use lmcl_core::meta::MetaLoopConfig;
use lmcl_core::train::{DatasetSpec, MiningMode, TrainConfig, Trainer};

fn small(mining: MiningMode) -> TrainConfig {
    TrainConfig {
        widths: vec![8, 8],
        embed_dim: 4,
        epochs: 3,
        batch_size: 8,
        mining,
        negatives: 12,
        bank_capacity: 48,
        meta: MetaLoopConfig {
            meta_period: 3,
            ..MetaLoopConfig::default()
        },
        dataset: DatasetSpec::Blobs(BlobSpec {
            classes: 4,
            per_class: 16,
            test_per_class: 8,
            dim: 6,
            spread: 0.4,
        }),
        ..TrainConfig::default()
    }
}

fn trainer(cfg: &TrainConfig) -> Trainer {
    let DatasetSpec::Blobs(spec) = &cfg.dataset else {
        unreachable!()
    };
    Trainer::new(cfg.clone(), gaussian_blobs(spec, cfg.resolved_data_seed()).unwrap()).unwrap()
}

fn resume_matches_continuous(mining: MiningMode) {
    let cfg = small(mining);
    let mut straight = trainer(&cfg);
    for _ in 0..3 {
        straight.train_epoch().unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(&cfg);
    first.train_epoch().unwrap();
    first.train_epoch().unwrap();
    checkpoint::save(dir.path(), &cfg, &first.state()).unwrap();
    drop(first);

    let mut resumed = run::restore(dir.path()).unwrap();
    assert_eq!(resumed.epoch(), 2);
    let last = resumed.train_epoch().unwrap();
    assert_eq!(last.epoch, 3);

    assert!(
        resumed.cohort.theta.bit_eq(&straight.cohort.theta),
        "{mining:?}: theta differs"
    );
    assert!(resumed.cohort.gate_params.bit_eq(&straight.cohort.gate_params));
    assert!(resumed.cohort.meta_params.bit_eq(&straight.cohort.meta_params));
    assert_eq!(resumed.iteration(), straight.iteration());
    assert_eq!(resumed.banks(), straight.banks());
}

#[test]
fn resume_is_bit_identical_with_batch_mining() {
    resume_matches_continuous(MiningMode::Batch);
}

#[test]
fn resume_is_bit_identical_with_memory_banks() {
    resume_matches_continuous(MiningMode::Memory);
}

#[test]
fn save_load_preserves_state() {
    let cfg = small(MiningMode::Memory);
    let mut t = trainer(&cfg);
    t.train_epoch().unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &cfg, &t.state()).unwrap();
    let (cfg2, state) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    let orig = t.state();
    assert!(state.theta.bit_eq(&orig.theta));
    assert_eq!(state.theta_velocity, orig.theta_velocity);
    assert_eq!(state.gate_velocity, orig.gate_velocity);
    assert_eq!(state.banks, orig.banks);
    assert_eq!(state.rng, orig.rng);
    assert_eq!((state.iteration, state.epoch), (orig.iteration, orig.epoch));
}

#[test]
fn damaged_checkpoints_are_reported() {
    let cfg = small(MiningMode::Batch);
    let t = trainer(&cfg);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &cfg, &t.state()).unwrap();

    let blob = dir.path().join(checkpoint::BLOB);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        checkpoint::load(dir.path()),
        Err(LmclError::Checkpoint { .. })
    ));

    fs::write(dir.path().join(MANIFEST), "{").unwrap();
    assert!(matches!(
        checkpoint::load(dir.path()),
        Err(LmclError::Checkpoint { .. })
    ));

    fs::remove_file(dir.path().join(MANIFEST)).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(LmclError::Io { .. })));
}

#[test]
fn checkpoint_from_another_architecture_is_rejected() {
    let cfg = small(MiningMode::Batch);
    let t = trainer(&cfg);
    let mut other = trainer(&TrainConfig {
        widths: vec![8, 8, 8],
        ..cfg.clone()
    });
    assert!(other.load_state(t.state()).is_err());
}
