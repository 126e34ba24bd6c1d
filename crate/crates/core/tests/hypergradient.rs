use std::rc::Rc;

use lmcl_core::contrastive::{MclWeights, SampleIds, TermSwitches};
use lmcl_core::meta::{finite_difference_hypergradient, hypergradient, CohortProblem, MetaLoopConfig};
use lmcl_core::mining::{batch_index, ClassAwareSampler};
use lmcl_core::nn::{Cohort, NetworkSpec};
use lmcl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn spec() -> NetworkSpec {
    NetworkSpec {
        input_dim: 5,
        widths: vec![8, 8],
        layers_per_stage: 1,
        embed_dim: 4,
        classes: 4,
    }
}

fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            norm += v * v;
        }
    }
    (diff / norm).sqrt()
}

fn parity(seed: u64) -> f64 {
    let cohort = Cohort::init(&spec(), &[seed, seed + 100], seed + 200, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..32).map(|i| i % 4).collect();
    let batch = ClassAwareSampler::new(&labels).sample(8, &mut rng).unwrap();
    let x_data: Vec<f64> = (0..8 * 5).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::from_vec(x_data, &[8, 5]).unwrap();
    let ids: SampleIds = Rc::from(batch.indices.iter().map(|&i| i as u64).collect::<Vec<_>>());
    let index = batch_index(&batch.labels, ids.clone()).unwrap();
    let problem = CohortProblem {
        cohort: &cohort,
        x: &x,
        labels: &batch.labels,
        ids,
        index: &index,
        bank_sources: None,
        tau: 0.5,
        weights: MclWeights { alpha: 1.0, beta: 1.0 },
        switches: TermSwitches::ALL,
    };
    let cfg = MetaLoopConfig {
        k_inner: 2,
        eta: 0.1,
        fd_step: 1e-5,
        ..MetaLoopConfig::default()
    };
    let theta = cohort.theta.bind(None);
    let pi = cohort.meta_params.bind(None);
    let (exact, _) = hypergradient(&problem, &theta, &pi, &cfg).unwrap();
    let fd = finite_difference_hypergradient(&problem, &theta, &pi, &cfg).unwrap();
    assert!(exact.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    relative_error(&exact, &fd)
}

#[test]
fn hypergradient_matches_finite_differences_on_three_seeds() {
    for seed in [1, 2, 3] {
        let err = parity(seed);
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}
