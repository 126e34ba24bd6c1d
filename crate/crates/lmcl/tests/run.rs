use std::fs;
use std::path::Path;

use lmcl::metrics::{DIAGNOSTICS, LAMBDA, LOSSES, METRICS, TIMING};
use lmcl::run;
use lmcl_core::data::BlobSpec;
use lmcl_core::meta::MetaLoopConfig;
use lmcl_core::probe::ProbeConfig;
use lmcl_core::train::{DatasetSpec, TrainConfig};

fn small() -> TrainConfig {
    TrainConfig {
        widths: vec![8, 8],
        embed_dim: 4,
        epochs: 2,
        batch_size: 8,
        export_embeddings: true,
        meta: MetaLoopConfig {
            meta_period: 2,
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

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn run_writes_outputs_and_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let out_a = run::train(&small(), &a).unwrap();
    run::train(&small(), &b).unwrap();

    for name in [METRICS, LOSSES, DIAGNOSTICS, LAMBDA, "embeddings/epoch_002.csv"] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs between identical runs");
    }
    let timing = read(&a, TIMING);
    assert_eq!(timing.lines().count(), 3);

    let metrics = read(&a, METRICS);
    // header + 2 epochs x 2 networks x 2 splits
    assert_eq!(metrics.lines().count(), 9);
    assert!(metrics.starts_with("epoch,net,split,accuracy\n"));
    let lambda = read(&a, LAMBDA);
    // 2 epochs x 4 stage pairs
    assert_eq!(lambda.lines().count(), 9);
    for line in lambda.lines().skip(1) {
        let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(v > 0.26 && v < 0.74, "lambda {v} outside (sigmoid(-1), sigmoid(1))");
    }
    assert!(a.join("checkpoint").join(lmcl::checkpoint::MANIFEST).exists());
    let summary: serde_json::Value = serde_json::from_str(&read(&a, "summary.json")).unwrap();
    assert_eq!(summary["epochs"], 2);

    let acc = run::evaluate(&a.join("checkpoint")).unwrap();
    assert_eq!(acc, out_a.summary.test_accuracy);

    let (m, probe) = run::probe(&a.join("checkpoint"), None, None, &ProbeConfig::default()).unwrap();
    assert_eq!(m, out_a.summary.best_network);
    assert!((0.0..=1.0).contains(&probe.test_accuracy));
    assert!(probe.final_loss.is_finite());
    assert!(run::probe(&a.join("checkpoint"), None, Some(5), &ProbeConfig::default()).is_err());

    let export = root.path().join("e.csv");
    run::export_embeddings(&a.join("checkpoint"), &export).unwrap();
    assert_eq!(
        fs::read_to_string(&export).unwrap(),
        read(&a, "embeddings/epoch_002.csv")
    );
}
