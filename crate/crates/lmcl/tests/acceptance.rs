//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::process::ExitCode;
use std::time::Instant;

use lmcl::checks::{self, Scale};
use lmcl_core::data::gaussian_blobs;
use lmcl_core::layerwise::MatchMode;
use lmcl_core::train::{DatasetSpec, LossFlags, TrainConfig, Trainer};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Minimum mean gain of the full method over independent training, in accuracy points.
const MIN_GAIN_POINTS: f64 = 1.0;

struct Criterion {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn from_check(id: usize, check: &'static str, limit_s: Option<f64>) -> Criterion {
    let (name, f) = *checks::CHECKS.iter().find(|(n, _)| *n == check).expect("known check");
    let r = checks::run(name, f, Scale::Full);
    let mut passed = r.passed;
    let mut detail = r.detail;
    if let Some(limit) = limit_s {
        if r.seconds >= limit {
            passed = false;
            detail = format!("{detail}; took {:.1}s, limit {limit}s", r.seconds);
        }
    }
    Criterion {
        id,
        name,
        passed,
        detail,
        seconds: r.seconds,
    }
}

/// Best network's final test accuracy of one run.
fn final_best(cfg: TrainConfig) -> f64 {
    let DatasetSpec::Blobs(spec) = &cfg.dataset else {
        panic!("end-to-end runs use the default blob dataset");
    };
    let data = gaussian_blobs(spec, cfg.resolved_data_seed()).expect("dataset");
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(cfg, data).expect("trainer");
    let mut last = Vec::new();
    for _ in 0..epochs {
        last = trainer.train_epoch().expect("epoch").test_accuracy;
    }
    last.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end() -> Criterion {
    let start = Instant::now();
    let run = |seed: u64, losses: LossFlags, matching: MatchMode| {
        final_best(TrainConfig {
            seed,
            losses,
            matching,
            ..TrainConfig::default()
        })
    };
    let mut baseline = Vec::new();
    let mut weighted = Vec::new();
    let mut one_to_one = Vec::new();
    for seed in SEEDS {
        baseline.push(run(seed, LossFlags::baseline(), MatchMode::Weighted));
        weighted.push(run(seed, LossFlags::default(), MatchMode::Weighted));
        one_to_one.push(run(seed, LossFlags::default(), MatchMode::OneToOne));
        eprintln!(
            "  seed {seed}: baseline {:.4} weighted {:.4} one-to-one {:.4}",
            baseline.last().unwrap(),
            weighted.last().unwrap(),
            one_to_one.last().unwrap()
        );
    }
    let seconds = start.elapsed().as_secs_f64();
    let (b, w, o) = (mean(&baseline), mean(&weighted), mean(&one_to_one));
    let gain = 100.0 * (w - b);
    let passed = gain >= MIN_GAIN_POINTS && w >= o && seconds < 1800.0;
    Criterion {
        id: 9,
        name: "end_to_end_improvement",
        passed,
        detail: format!(
            "mean accuracy baseline {:.2}%, weighted {:.2}%, one-to-one {:.2}%; gain {gain:+.2} points (need >= {MIN_GAIN_POINTS}), weighted - one-to-one {:+.2} points; {seconds:.0}s (limit 1800s)",
            100.0 * b,
            100.0 * w,
            100.0 * o,
            100.0 * (w - o)
        ),
        seconds,
    }
}

fn main() -> ExitCode {
    let only: Option<usize> = std::env::var("LMCL_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let plan: [(usize, &dyn Fn() -> Criterion); 10] = [
        (1, &|| from_check(1, "gradient_parity", Some(60.0))),
        (2, &|| from_check(2, "distribution_invariants", None)),
        (3, &|| from_check(3, "detach_contracts", None)),
        (4, &|| from_check(4, "hypergradient_oracle", Some(120.0))),
        (5, &|| from_check(5, "mi_bound", None)),
        (6, &|| from_check(6, "ablation_identities", None)),
        (7, &|| from_check(7, "mining_semantics", None)),
        (8, &|| from_check(8, "similarity_count", None)),
        (9, &end_to_end),
        (10, &|| from_check(10, "inference_graph", None)),
    ];
    let mut results = Vec::new();
    for (id, f) in plan {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let c = f();
        println!(
            "{} criterion {:>2} {} ({:.1}s): {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            c.seconds,
            c.detail
        );
        results.push(c);
    }
    let failed = results.iter().filter(|c| !c.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
