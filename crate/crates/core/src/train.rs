//! Training configuration, the total objective and the outer loop.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    mi_bound, ContrastiveIndex, Embeddings, MclWeights, SampleIds, SimilarityCounter, TermSwitches,
};
use crate::data::{stratified_subset, BlobSpec, LabeledDataset, TrainTest};
use crate::error::{Error, Result};
use crate::layerwise::{cohort_embeddings, lmcl_loss, LayerPair, LmclOutput, MatchMode, MatchWeights};
use crate::logit::{branch_task_loss, logit_loss, LogitLoss};
use crate::meta::{meta_step, CohortProblem, MetaLoopConfig, MetaReport};
use crate::mining::{batch_index, sample_ids, ClassAwareSampler, CohortBanks};
use crate::nn::{argmax_rows, Cohort, NetworkSpec, ParamStore};
use crate::tensor::{Graph, Tensor};

/// Total loss above which training is aborted.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    /// Class-aware batches; negatives are the other batch samples.
    #[default]
    Batch,
    /// Negatives retrieved from per-(network, stage) memory banks.
    Memory,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Per-iteration cosine decay to zero.
    #[default]
    Cosine,
    /// Divide by 10 at half and at three quarters of the epochs.
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to network parameters only.
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate at `iteration` (0-based) of `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize, epochs: usize, iteration: u64, total_iterations: u64) -> f64 {
        match self.schedule {
            Schedule::Cosine => {
                let t = iteration as f64 / total_iterations.max(1) as f64;
                0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * t.min(1.0)))
            }
            Schedule::Step => {
                let passed = [epochs / 2, 3 * epochs / 4]
                    .iter()
                    .filter(|&&m| m > 0 && epoch >= m)
                    .count();
                self.lr * libm::pow(0.1, passed as f64)
            }
        }
    }
}

/// Which parts of the total objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossFlags {
    pub lmcl: bool,
    pub terms: TermSwitches,
    pub logit_kd: bool,
    /// Replace the gate with `1/L` weights.
    pub uniform_gate: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            lmcl: true,
            terms: TermSwitches::ALL,
            logit_kd: true,
            uniform_gate: false,
        }
    }
}

impl LossFlags {
    /// Independent training: branch cross-entropy only.
    pub fn baseline() -> Self {
        LossFlags {
            lmcl: false,
            terms: TermSwitches::ALL,
            logit_kd: false,
            uniform_gate: false,
        }
    }

    fn contrastive(&self) -> bool {
        self.lmcl && self.terms.any()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Blobs(BlobSpec),
    /// Feature columns then an integer label column.
    Csv {
        train: String,
        test: String,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs(BlobSpec {
            classes: 8,
            per_class: 500,
            test_per_class: 250,
            dim: 32,
            spread: 0.35,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub networks: usize,
    pub widths: Vec<usize>,
    pub layers_per_stage: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub mcl: MclWeights,
    pub temperature: f64,
    /// Negatives per anchor in memory mode.
    pub negatives: usize,
    pub mining: MiningMode,
    pub bank_capacity: usize,
    pub matching: MatchMode,
    pub meta: MetaLoopConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// One per network; derived from `seed` when empty.
    pub network_seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// Dataset seed; `seed` when unset.
    pub data_seed: Option<u64>,
    /// Stratified fraction of the training set to keep.
    pub train_fraction: f64,
    pub losses: LossFlags,
    pub export_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            networks: 2,
            widths: vec![64, 64, 64],
            layers_per_stage: 1,
            embed_dim: 32,
            tau: 0.1,
            mcl: MclWeights::default(),
            temperature: 3.0,
            negatives: 512,
            mining: MiningMode::Batch,
            bank_capacity: 4096,
            matching: MatchMode::Weighted,
            meta: MetaLoopConfig::default(),
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            network_seeds: Vec::new(),
            dataset: DatasetSpec::default(),
            data_seed: None,
            train_fraction: 1.0,
            losses: LossFlags::default(),
            export_embeddings: false,
        }
    }
}

fn positive(what: &'static str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::invalid(what, format!("{v} (must be > 0)")));
    }
    Ok(())
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.networks < 2 {
            return Err(Error::invalid(
                "networks",
                format!("{} (mutual learning needs at least 2)", self.networks),
            ));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("widths", "need at least one stage of positive width"));
        }
        if self.layers_per_stage == 0 || self.embed_dim == 0 {
            return Err(Error::invalid("layers_per_stage/embed_dim", "must be positive"));
        }
        positive("tau", self.tau)?;
        positive("temperature", self.temperature)?;
        self.mcl.validate()?;
        self.meta.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        match self.mining {
            MiningMode::Batch => {
                if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
                    return Err(Error::invalid(
                        "batch_size",
                        format!("{} (batch mining needs an even size of at least 4)", self.batch_size),
                    ));
                }
            }
            MiningMode::Memory => {
                if self.batch_size == 0 {
                    return Err(Error::invalid("batch_size", "must be positive"));
                }
                if self.negatives == 0 || self.negatives >= self.bank_capacity {
                    return Err(Error::invalid(
                        "negatives",
                        format!(
                            "{} (must be in [1, bank_capacity = {}))",
                            self.negatives, self.bank_capacity
                        ),
                    ));
                }
            }
        }
        positive("optimizer.lr", self.optimizer.lr)?;
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(Error::invalid("optimizer.momentum", "must be in [0, 1)"));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::invalid("optimizer.weight_decay", "must be >= 0"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid("train_fraction", "must be in (0, 1]"));
        }
        if !self.network_seeds.is_empty() && self.network_seeds.len() != self.networks {
            return Err(Error::invalid(
                "network_seeds",
                format!("{} seeds for {} networks", self.network_seeds.len(), self.networks),
            ));
        }
        let seeds = self.resolved_seeds();
        for (i, s) in seeds.iter().enumerate() {
            if seeds[..i].contains(s) {
                return Err(Error::invalid("network_seeds", format!("seed {s} repeated")));
            }
        }
        if let DatasetSpec::Blobs(b) = &self.dataset {
            b.validate()?;
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if !self.network_seeds.is_empty() {
            return self.network_seeds.clone();
        }
        (0..self.networks as u64)
            .map(|m| self.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(m + 1))
            .collect()
    }

    pub fn resolved_data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn network_spec(&self, input_dim: usize, classes: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            widths: self.widths.clone(),
            layers_per_stage: self.layers_per_stage,
            embed_dim: self.embed_dim,
            classes,
        }
    }

    fn learned_matching(&self) -> bool {
        self.losses.contrastive() && self.matching == MatchMode::Weighted
    }
}

/// Scalar values of every loss component.
///
/// `vcl`, `icl`, `soft_vcl` and `soft_icl` sum the unscaled anchor means over
/// layer pairs; `lmcl` is the weighted layer-wise total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub vcl: f64,
    pub icl: f64,
    pub soft_vcl: f64,
    pub soft_icl: f64,
    pub lmcl: f64,
    pub task_g: f64,
    pub ens: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 9] = [
        "task", "vcl", "icl", "soft_vcl", "soft_icl", "lmcl", "task_g", "ens", "total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.task,
            self.vcl,
            self.icl,
            self.soft_vcl,
            self.soft_icl,
            self.lmcl,
            self.task_g,
            self.ens,
            self.total,
        ]
    }

    fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.task += other.task * scale;
        self.vcl += other.vcl * scale;
        self.icl += other.icl * scale;
        self.soft_vcl += other.soft_vcl * scale;
        self.soft_icl += other.soft_icl * scale;
        self.lmcl += other.lmcl * scale;
        self.task_g += other.task_g * scale;
        self.ens += other.ens * scale;
        self.total += other.total * scale;
    }

    fn check(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    component: (*name).into(),
                    value: v,
                });
            }
        }
        if self.total > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged { loss: self.total });
        }
        Ok(())
    }
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub ids: SampleIds,
}

/// Contrastive rows for a batch: the index and, in memory mode, the bank contents.
#[derive(Clone, Debug)]
pub struct Contrast {
    pub index: ContrastiveIndex,
    pub bank_sources: Option<Vec<Vec<Embeddings>>>,
}

pub struct LossOutput {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    pub logit: Option<LogitLoss>,
    pub lmcl: Option<LmclOutput>,
    pub match_weights: Option<MatchWeights>,
    /// Normalized embeddings of the batch, `[m][l]`.
    pub embeddings: Vec<Vec<Embeddings>>,
}

/// Task + logit distillation + layer-wise contrastive loss.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    cohort: &Cohort,
    theta: &[Tensor],
    gate_params: &[Tensor],
    meta_params: &[Tensor],
    batch: &Batch,
    contrast: Option<&Contrast>,
    cfg: &TrainConfig,
    counter: Option<&SimilarityCounter>,
) -> Result<LossOutput> {
    let outputs = cohort.forward(theta, &batch.x)?;
    let branches: Vec<Vec<Tensor>> = outputs.iter().map(|o| o.logits.clone()).collect();
    let task = branch_task_loss(&branches, &batch.labels)?;
    let mut breakdown = LossBreakdown {
        task: task.item(),
        ..LossBreakdown::default()
    };
    let mut total = task;

    let logit = if cfg.losses.logit_kd {
        let weights = if cfg.losses.uniform_gate {
            None
        } else {
            Some(
                cohort
                    .gates
                    .iter()
                    .zip(&outputs)
                    .map(|(g, o)| g.weights(gate_params, &o.features))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let out = logit_loss(&branches, weights.as_deref(), &batch.labels, cfg.temperature)?;
        breakdown.task_g = out.task_g.item();
        breakdown.ens = out.ens.item();
        total = total.add(&out.total)?;
        Some(out)
    } else {
        None
    };

    let embeddings = cohort_embeddings(&outputs, &batch.ids)?;
    let (lmcl, match_weights) = if cfg.losses.contrastive() {
        let contrast =
            contrast.ok_or_else(|| Error::invalid("total loss", "contrastive terms need a contrastive index"))?;
        let anchors = contrast.index.anchors();
        let mw = match cfg.matching {
            MatchMode::Weighted => {
                let v: Vec<Vec<Tensor>> = embeddings
                    .iter()
                    .map(|s| s.iter().map(|e| e.values.detach()).collect())
                    .collect();
                let pi: Vec<Tensor> = meta_params.iter().map(Tensor::detach).collect();
                MatchWeights::learned(&cohort.meta, &pi, &v)?.detach()
            }
            mode => MatchWeights::fixed(mode, cohort.size(), cohort.stages(), anchors)?,
        };
        let sources = contrast.bank_sources.as_deref().unwrap_or(&embeddings);
        let out = lmcl_loss(
            &embeddings,
            sources,
            &contrast.index,
            cfg.tau,
            &mw,
            cfg.mcl,
            cfg.losses.terms,
            counter,
        )?;
        for p in &out.pairs {
            breakdown.vcl += p.parts.vcl;
            breakdown.icl += p.parts.icl;
            breakdown.soft_vcl += p.parts.soft_vcl;
            breakdown.soft_icl += p.parts.soft_icl;
        }
        breakdown.lmcl = out.loss.item();
        total = total.add(&out.loss)?;
        (Some(out), Some(mw))
    } else {
        (None, None)
    };
    breakdown.total = total.item();
    breakdown.check()?;
    Ok(LossOutput {
        total,
        breakdown,
        logit,
        lmcl,
        match_weights,
        embeddings,
    })
}

/// Top-1 accuracy of `logits` against `labels`.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Index of the highest accuracy; ties go to the lowest index.
pub fn best_network(accuracies: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[best] {
            best = i;
        }
    }
    best
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState {
    pub theta: ParamStore,
    pub gate_params: ParamStore,
    /// Absent in snapshots taken around the meta step.
    pub meta_params: Option<ParamStore>,
    pub theta_velocity: Vec<Vec<f64>>,
    pub gate_velocity: Vec<Vec<f64>>,
    pub banks: Option<CohortBanks>,
    pub rng: RngState,
    pub iteration: u64,
    pub epoch: usize,
}

/// Per-step diagnostics.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub mi_bound: Option<f64>,
    pub lambda: Vec<(LayerPair, f64)>,
    pub meta: Option<MetaReport>,
}

/// One record per finished epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Means over the epoch's iterations.
    pub losses: LossBreakdown,
    pub mi_bound: Option<f64>,
    pub lambda: Vec<(LayerPair, f64)>,
    pub hypergradient_norm: Option<f64>,
    pub lr: f64,
}

pub struct Trainer {
    config: TrainConfig,
    pub cohort: Cohort,
    train: LabeledDataset,
    test: LabeledDataset,
    sampler: ClassAwareSampler,
    theta_velocity: Vec<Vec<f64>>,
    gate_velocity: Vec<Vec<f64>>,
    banks: Option<CohortBanks>,
    rng: ChaCha8Rng,
    iteration: u64,
    epoch: usize,
    snapshot: Option<Box<TrainerState>>,
}

fn zeros_like(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|p| vec![0.0; p.data.len()]).collect()
}

fn sgd(store: &mut ParamStore, velocity: &mut [Vec<f64>], grads: &[Tensor], lr: f64, momentum: f64, decay: f64) {
    for ((p, v), g) in store.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((w, m), d) in p.data.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *m = momentum * *m + d + decay * *w;
            *w -= lr * *m;
        }
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainTest) -> Result<Self> {
        config.validate()?;
        if data.train.dim() != data.test.dim() || data.train.classes() != data.test.classes() {
            return Err(Error::invalid(
                "dataset",
                "train and test sets differ in width or class count",
            ));
        }
        let train = stratified_subset(&data.train, config.train_fraction, config.resolved_data_seed())?;
        let spec = config.network_spec(train.dim(), train.classes());
        let cohort = Cohort::init(
            &spec,
            &config.resolved_seeds(),
            config.seed ^ 0x3c6e_f372_fe94_f82b,
            config.learned_matching(),
        )?;
        let sampler = ClassAwareSampler::new(train.labels());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(7);
        let banks = match config.mining {
            MiningMode::Memory if config.losses.contrastive() => {
                let mut bank_rng = ChaCha8Rng::seed_from_u64(config.seed);
                bank_rng.set_stream(11);
                Some(CohortBanks::random(
                    config.networks,
                    config.stages(),
                    config.bank_capacity,
                    config.embed_dim,
                    train.classes(),
                    &mut bank_rng,
                )?)
            }
            _ => None,
        };
        if config.mining == MiningMode::Batch {
            // Fail early on datasets that cannot fill a class-aware batch.
            sampler.sample(config.batch_size, &mut rng.clone())?;
        }
        Ok(Trainer {
            theta_velocity: zeros_like(&cohort.theta),
            gate_velocity: zeros_like(&cohort.gate_params),
            config,
            cohort,
            test: data.test,
            train,
            sampler,
            banks,
            rng,
            iteration: 0,
            epoch: 0,
            snapshot: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn train_set(&self) -> &LabeledDataset {
        &self.train
    }

    pub fn test_set(&self) -> &LabeledDataset {
        &self.test
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn banks(&self) -> Option<&CohortBanks> {
        self.banks.as_ref()
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        (self.train.len() / self.config.batch_size).max(1) as u64
    }

    fn total_iterations(&self) -> u64 {
        self.iterations_per_epoch() * self.config.epochs as u64
    }

    pub fn current_lr(&self) -> f64 {
        self.config
            .optimizer
            .lr_at(self.epoch, self.config.epochs, self.iteration, self.total_iterations())
    }

    /// Batch order for one epoch.
    fn epoch_batches(&mut self) -> Result<Vec<Vec<usize>>> {
        let b = self.config.batch_size;
        let n = self.iterations_per_epoch() as usize;
        match self.config.mining {
            MiningMode::Batch => (0..n)
                .map(|_| Ok(self.sampler.sample(b, &mut self.rng)?.indices))
                .collect(),
            MiningMode::Memory => {
                let mut order: Vec<usize> = (0..self.train.len()).collect();
                order.shuffle(&mut self.rng);
                Ok(order
                    .chunks(b.min(order.len()))
                    .take(n)
                    .map(<[usize]>::to_vec)
                    .collect())
            }
        }
    }

    fn contrast(&mut self, batch: &Batch) -> Result<Option<Contrast>> {
        if !self.config.losses.contrastive() {
            return Ok(None);
        }
        match &self.banks {
            None => Ok(Some(Contrast {
                index: batch_index(&batch.labels, batch.ids.clone())?,
                bank_sources: None,
            })),
            Some(banks) => {
                let index =
                    banks.retrieve_index(&batch.labels, batch.ids.clone(), self.config.negatives, &mut self.rng)?;
                let sources = (0..banks.networks())
                    .map(|m| (0..banks.stages()).map(|l| banks.source(m, l)).collect())
                    .collect::<Result<Vec<Vec<_>>>>()?;
                Ok(Some(Contrast {
                    index,
                    bank_sources: Some(sources),
                }))
            }
        }
    }

    /// One outer iteration on the given training rows.
    pub fn step(&mut self, indices: &[usize]) -> Result<StepReport> {
        let (x, labels) = self.train.batch(indices)?;
        let batch = Batch {
            x,
            labels,
            ids: sample_ids(indices),
        };
        let contrast = self.contrast(&batch)?;
        let lr = self.current_lr();
        let graph = Graph::new();
        let theta = self.cohort.theta.bind(Some(&graph));
        let gates = self.cohort.gate_params.bind(Some(&graph));
        let pi = self.cohort.meta_params.bind(None);
        let out = total_loss(
            &self.cohort,
            &theta,
            &gates,
            &pi,
            &batch,
            contrast.as_ref(),
            &self.config,
            None,
        )?;
        let theta_refs: Vec<&Tensor> = theta.iter().collect();
        let gate_refs: Vec<&Tensor> = gates.iter().collect();
        let all: Vec<&Tensor> = theta_refs.iter().chain(&gate_refs).copied().collect();
        let mut grads = graph.grad(&out.total, None, &all, false)?;
        let gate_grads = grads.split_off(theta.len());
        let opt = &self.config.optimizer;
        sgd(
            &mut self.cohort.theta,
            &mut self.theta_velocity,
            &grads,
            lr,
            opt.momentum,
            opt.weight_decay,
        );
        if self.config.losses.logit_kd && !self.config.losses.uniform_gate {
            sgd(
                &mut self.cohort.gate_params,
                &mut self.gate_velocity,
                &gate_grads,
                lr,
                opt.momentum,
                0.0,
            );
        }

        let mi = out.lmcl.as_ref().and_then(|l| {
            let last = self.config.stages() - 1;
            let finals: Vec<f64> = l
                .pairs
                .iter()
                .filter(|p| p.pair.la == last && p.pair.lb == last)
                .map(|p| p.icl_mean)
                .collect();
            let k = contrast.as_ref()?.index.negatives();
            (!finals.is_empty()).then(|| mi_bound(finals.iter().sum::<f64>() / finals.len() as f64, k))
        });
        let lambda = out.match_weights.as_ref().map(MatchWeights::means).unwrap_or_default();

        self.iteration += 1;
        let meta =
            if self.config.learned_matching() && self.iteration.is_multiple_of(self.config.meta.meta_period as u64) {
                let contrast = contrast.as_ref().expect("contrastive terms are active");
                let problem = CohortProblem {
                    cohort: &self.cohort,
                    x: &batch.x,
                    labels: &batch.labels,
                    ids: batch.ids.clone(),
                    index: &contrast.index,
                    bank_sources: contrast.bank_sources.as_deref(),
                    tau: self.config.tau,
                    weights: self.config.mcl,
                    switches: self.config.losses.terms,
                };
                let mut pi = self.cohort.meta_params.clone();
                let report = meta_step(
                    &problem,
                    &self.cohort.theta,
                    &mut pi,
                    &self.config.meta,
                    self.config.meta.meta_lr(lr),
                )?;
                self.cohort.meta_params = pi;
                Some(report)
            } else {
                None
            };

        if let Some(banks) = self.banks.as_mut() {
            let per_bank: Vec<Vec<Tensor>> = out
                .embeddings
                .iter()
                .map(|s| s.iter().map(|e| e.values.detach()).collect())
                .collect();
            banks.enqueue(&per_bank, &batch.labels)?;
        }
        Ok(StepReport {
            losses: out.breakdown,
            lr,
            mi_bound: mi,
            lambda,
            meta,
        })
    }

    /// Trains one epoch and evaluates every network on both splits.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let batches = self.epoch_batches()?;
        let n = batches.len() as f64;
        let mut losses = LossBreakdown::default();
        let (mut mi_sum, mut mi_count) = (0.0, 0usize);
        let mut lambda: Vec<(LayerPair, f64)> = Vec::new();
        let (mut hg_sum, mut hg_count) = (0.0, 0usize);
        let mut lr = self.current_lr();
        for (i, indices) in batches.iter().enumerate() {
            let report = self.step(indices)?;
            if i == 0 {
                lr = report.lr;
            }
            losses.accumulate(&report.losses, 1.0 / n);
            if let Some(mi) = report.mi_bound {
                mi_sum += mi;
                mi_count += 1;
            }
            if lambda.is_empty() {
                lambda = report.lambda.iter().map(|(p, _)| (*p, 0.0)).collect();
            }
            for ((_, acc), (_, v)) in lambda.iter_mut().zip(&report.lambda) {
                *acc += v / n;
            }
            if let Some(m) = report.meta.filter(|m| m.applied) {
                hg_sum += m.hypergradient_norm;
                hg_count += 1;
            }
        }
        self.epoch += 1;
        let networks = self.cohort.size();
        let train_accuracy = (0..networks)
            .map(|m| self.evaluate(m, &self.train))
            .collect::<Result<Vec<_>>>()?;
        let test_accuracy = (0..networks)
            .map(|m| self.evaluate(m, &self.test))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpochRecord {
            epoch: self.epoch,
            train_accuracy,
            test_accuracy,
            losses,
            mi_bound: (mi_count > 0).then(|| mi_sum / mi_count as f64),
            lambda,
            hypergradient_norm: (hg_count > 0).then(|| hg_sum / hg_count as f64),
            lr,
        })
    }

    /// Runs the remaining epochs.
    pub fn train(&mut self) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::with_capacity(self.config.epochs.saturating_sub(self.epoch));
        while self.epoch < self.config.epochs {
            out.push(self.train_epoch()?);
        }
        Ok(out)
    }

    /// Top-1 accuracy of network `m` through its inference graph.
    pub fn evaluate(&self, m: usize, dataset: &LabeledDataset) -> Result<f64> {
        let (x, labels) = dataset.all()?;
        let theta = self.cohort.theta.bind(None);
        Ok(accuracy(&self.cohort.networks[m].predict_logits(&theta, &x)?, &labels))
    }

    pub fn best_network(&self, dataset: &LabeledDataset) -> Result<(usize, f64)> {
        let acc = (0..self.cohort.size())
            .map(|m| self.evaluate(m, dataset))
            .collect::<Result<Vec<_>>>()?;
        let best = best_network(&acc);
        Ok((best, acc[best]))
    }

    /// Final-stage normalized embeddings of network `m` on `dataset`.
    pub fn final_embeddings(&self, m: usize, dataset: &LabeledDataset) -> Result<Tensor> {
        let (x, _) = dataset.all()?;
        let theta = self.cohort.theta.bind(None);
        let out = self.cohort.networks[m].forward(&theta, &x)?;
        out.embeddings[out.embeddings.len() - 1].l2_normalize_rows()
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            theta: self.cohort.theta.clone(),
            gate_params: self.cohort.gate_params.clone(),
            meta_params: Some(self.cohort.meta_params.clone()),
            theta_velocity: self.theta_velocity.clone(),
            gate_velocity: self.gate_velocity.clone(),
            banks: self.banks.clone(),
            rng: RngState::capture(&self.rng),
            iteration: self.iteration,
            epoch: self.epoch,
        }
    }

    /// Replaces the evolving state; parameter layouts must match.
    pub fn load_state(&mut self, state: TrainerState) -> Result<()> {
        let same_layout = |a: &ParamStore, b: &ParamStore| {
            a.len() == b.len()
                && a.iter()
                    .zip(b.iter())
                    .all(|(x, y)| x.name == y.name && x.shape == y.shape)
        };
        if !same_layout(&self.cohort.theta, &state.theta) || !same_layout(&self.cohort.gate_params, &state.gate_params)
        {
            return Err(Error::invalid(
                "trainer state",
                "parameter layout differs from the configured cohort",
            ));
        }
        if let Some(pi) = &state.meta_params {
            if !same_layout(&self.cohort.meta_params, pi) {
                return Err(Error::invalid("trainer state", "meta-network layout differs"));
            }
        }
        let velocity_fits = |store: &ParamStore, v: &[Vec<f64>]| {
            store.len() == v.len() && store.iter().zip(v).all(|(p, v)| p.data.len() == v.len())
        };
        if !velocity_fits(&state.theta, &state.theta_velocity)
            || !velocity_fits(&state.gate_params, &state.gate_velocity)
        {
            return Err(Error::invalid(
                "trainer state",
                "optimizer velocity does not match the parameters",
            ));
        }
        if self.banks.is_some() != state.banks.is_some() {
            return Err(Error::invalid(
                "trainer state",
                "memory banks do not match the mining mode",
            ));
        }
        self.cohort.theta = state.theta;
        self.cohort.gate_params = state.gate_params;
        if let Some(pi) = state.meta_params {
            self.cohort.meta_params = pi;
        }
        self.theta_velocity = state.theta_velocity;
        self.gate_velocity = state.gate_velocity;
        self.banks = state.banks;
        self.rng = state.rng.restore();
        self.iteration = state.iteration;
        self.epoch = state.epoch;
        Ok(())
    }

    /// Saves parameters (excluding the meta-network), optimizer state, banks and rng.
    pub fn snapshot(&mut self) -> Result<()> {
        if self.snapshot.is_some() {
            return Err(Error::SnapshotActive);
        }
        let mut state = self.state();
        state.meta_params = None;
        self.snapshot = Some(Box::new(state));
        Ok(())
    }

    pub fn restore(&mut self) -> Result<()> {
        let state = self.snapshot.take().ok_or(Error::NoSnapshot)?;
        self.load_state(*state)
    }
}

/// Whether a configuration trains its gate modules.
pub fn trains_gates(cfg: &TrainConfig) -> bool {
    cfg.losses.logit_kd && !cfg.losses.uniform_gate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blobs;

    fn tiny(mining: MiningMode) -> (TrainConfig, TrainTest) {
        let blobs = BlobSpec {
            classes: 4,
            per_class: 16,
            test_per_class: 8,
            dim: 6,
            spread: 0.3,
        };
        let cfg = TrainConfig {
            widths: vec![8, 8],
            embed_dim: 4,
            epochs: 2,
            batch_size: 8,
            negatives: 8,
            bank_capacity: 32,
            mining,
            meta: MetaLoopConfig {
                meta_period: 3,
                ..MetaLoopConfig::default()
            },
            dataset: DatasetSpec::Blobs(blobs.clone()),
            seed: 5,
            ..TrainConfig::default()
        };
        let data = gaussian_blobs(&blobs, 1).unwrap();
        (cfg, data)
    }

    #[test]
    fn single_network_rejected() {
        let (cfg, data) = tiny(MiningMode::Batch);
        let cfg = TrainConfig { networks: 1, ..cfg };
        assert!(Trainer::new(cfg, data).is_err());
    }

    #[test]
    fn odd_batch_and_repeated_seeds_rejected() {
        let (cfg, _) = tiny(MiningMode::Batch);
        assert!(TrainConfig {
            batch_size: 7,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            network_seeds: vec![3, 3],
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn schedules() {
        let opt = OptimizerConfig::default();
        assert!((opt.lr_at(0, 10, 0, 100) - 0.05).abs() < 1e-15);
        assert!(opt.lr_at(9, 10, 100, 100).abs() < 1e-15);
        let step = OptimizerConfig {
            schedule: Schedule::Step,
            ..opt
        };
        assert!((step.lr_at(4, 10, 0, 1) - 0.05).abs() < 1e-15);
        assert!((step.lr_at(5, 10, 0, 1) - 0.005).abs() < 1e-15);
        assert!((step.lr_at(8, 10, 0, 1) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn best_network_ties_go_low() {
        assert_eq!(best_network(&[0.5, 0.7, 0.7]), 1);
        assert_eq!(best_network(&[0.9, 0.9]), 0);
    }

    #[test]
    fn training_is_deterministic_in_both_mining_modes() {
        for mode in [MiningMode::Batch, MiningMode::Memory] {
            let (cfg, data) = tiny(mode);
            let a = Trainer::new(cfg.clone(), data.clone()).unwrap().train().unwrap();
            let b = Trainer::new(cfg, data).unwrap().train().unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|r| r.losses.values().iter().all(|v| v.is_finite())));
            assert!(a[1].hypergradient_norm.is_some());
        }
    }

    #[test]
    fn distillation_off_leaves_task_loss_only() {
        let (cfg, data) = tiny(MiningMode::Batch);
        let cfg = TrainConfig {
            losses: LossFlags::baseline(),
            ..cfg
        };
        let mut t = Trainer::new(cfg, data).unwrap();
        let r = t.train_epoch().unwrap();
        assert_eq!(r.losses.total, r.losses.task);
        assert_eq!(r.losses.lmcl, 0.0);
        assert!(r.mi_bound.is_none());
    }

    #[test]
    fn snapshot_restore_is_bit_exact_and_does_not_nest() {
        let (cfg, data) = tiny(MiningMode::Memory);
        let cfg = TrainConfig {
            matching: MatchMode::AllToAll,
            ..cfg
        };
        let mut reference = Trainer::new(cfg.clone(), data.clone()).unwrap();
        let expected = reference.train_epoch().unwrap();

        let mut t = Trainer::new(cfg, data).unwrap();
        t.snapshot().unwrap();
        assert_eq!(t.snapshot(), Err(Error::SnapshotActive));
        t.train_epoch().unwrap();
        t.restore().unwrap();
        assert_eq!(t.restore(), Err(Error::NoSnapshot));
        assert_eq!(t.train_epoch().unwrap(), expected);
        assert!(t.cohort.theta.bit_eq(&reference.cohort.theta));
    }

    #[test]
    fn restore_keeps_meta_network() {
        let (cfg, data) = tiny(MiningMode::Batch);
        let mut t = Trainer::new(cfg, data).unwrap();
        let before = t.cohort.theta.clone();
        t.snapshot().unwrap();
        t.train_epoch().unwrap();
        let pi = t.cohort.meta_params.clone();
        t.restore().unwrap();
        assert!(t.cohort.theta.bit_eq(&before));
        assert!(t.cohort.meta_params.bit_eq(&pi));
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let (cfg, data) = tiny(MiningMode::Batch);
        let mut a = Trainer::new(cfg.clone(), data.clone()).unwrap();
        a.train_epoch().unwrap();
        let state = a.state();
        let mut b = Trainer::new(cfg, data).unwrap();
        b.load_state(state).unwrap();
        assert_eq!(a.train_epoch().unwrap(), b.train_epoch().unwrap());
    }
}
