use std::fs;

use lmcl::config::{apply_override, load, resolve, save, to_json};
use lmcl::LmclError;
use lmcl_core::layerwise::MatchMode;
use lmcl_core::train::{MiningMode, TrainConfig};
use serde_json::json;

#[test]
fn defaults_round_trip_through_json() {
    let cfg = TrainConfig::default();
    let back: TrainConfig = serde_json::from_str(&to_json(&cfg)).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn overrides_reach_nested_keys() {
    let cfg = resolve(
        None,
        &[
            "epochs=3".into(),
            "mcl.alpha=0.5".into(),
            "matching=one-to-one".into(),
            "widths=[16,16]".into(),
            "mining=memory".into(),
            "negatives=32".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.mcl.alpha, 0.5);
    assert_eq!(cfg.matching, MatchMode::OneToOne);
    assert_eq!(cfg.widths, vec![16, 16]);
    assert_eq!(cfg.mining, MiningMode::Memory);
    assert_eq!(cfg.negatives, 32);
}

#[test]
fn unknown_override_key_is_rejected() {
    let err = resolve(None, &["mcl.gamma=1".into()]).unwrap_err();
    assert!(
        matches!(err, LmclError::Config(ref m) if m.contains("mcl.gamma")),
        "{err}"
    );
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn override_without_equals_is_rejected() {
    let mut v = json!({"epochs": 1});
    assert!(apply_override(&mut v, "epochs").is_err());
}

#[test]
fn wrong_type_is_a_config_error() {
    let err = resolve(None, &["epochs=many".into()]).unwrap_err();
    assert!(matches!(err, LmclError::Config(_)));
}

#[test]
fn invalid_values_fail_validation() {
    for o in ["networks=1", "batch_size=5", "network_seeds=[3,3]"] {
        let err = resolve(None, &[o.into()]).unwrap_err();
        assert!(matches!(err, LmclError::Core(_)), "{o}: {err}");
    }
}

#[test]
fn file_keys_default_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let partial = dir.path().join("partial.json");
    fs::write(&partial, r#"{"epochs": 4, "tau": 0.2}"#).unwrap();
    let cfg = load(&partial).unwrap();
    assert_eq!((cfg.epochs, cfg.tau), (4, 0.2));
    assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epoch": 4}"#).unwrap();
    assert!(matches!(load(&bad), Err(LmclError::Config(_))));

    let missing = dir.path().join("missing.json");
    assert!(matches!(load(&missing), Err(LmclError::Io { .. })));
}

#[test]
fn saved_config_overrides_apply_on_top() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let cfg = TrainConfig {
        epochs: 7,
        ..TrainConfig::default()
    };
    save(&cfg, &path).unwrap();
    let got = resolve(Some(&path), &["seed=9".into()]).unwrap();
    assert_eq!((got.epochs, got.seed), (7, 9));
}
