//! Bilevel optimization of the meta-network.
//!
//! Starting from a copy of the network parameters, `K` plain gradient steps
//! on the weighted layer-wise loss are followed by one step on the task loss.
//! The task loss after those steps is differentiated with respect to the
//! meta parameters through the whole unrolled chain.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveIndex, Embeddings, MclWeights, SampleIds, TermSwitches};
use crate::error::{Error, Result};
use crate::layerwise::{cohort_embeddings, pair_losses, weighted_sum, CohortView, MatchWeights};
use crate::logit::branch_task_loss;
use crate::nn::{Cohort, ParamStore};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaLoopConfig {
    /// Unrolled inner steps; 0 is the degenerate ablation.
    pub k_inner: usize,
    /// Inner learning rate.
    pub eta: f64,
    /// Run the meta step every this many outer iterations.
    pub meta_period: usize,
    /// Meta learning rate; defaults to a tenth of the outer learning rate.
    pub lr: Option<f64>,
    /// Central differences instead of reverse mode (debugging only).
    pub finite_difference: bool,
    pub fd_step: f64,
}

impl Default for MetaLoopConfig {
    fn default() -> Self {
        MetaLoopConfig {
            k_inner: 2,
            eta: 0.05,
            meta_period: 50,
            lr: None,
            finite_difference: false,
            fd_step: 1e-5,
        }
    }
}

impl MetaLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::invalid("meta.eta", format!("{} (must be > 0)", self.eta)));
        }
        if self.meta_period == 0 {
            return Err(Error::invalid("meta.meta_period", "must be at least 1"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::invalid("meta.lr", format!("{lr} (must be > 0)")));
            }
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::invalid("meta.fd_step", "must be > 0"));
        }
        Ok(())
    }

    pub fn meta_lr(&self, outer_lr: f64) -> f64 {
        self.lr.unwrap_or(outer_lr * 0.1)
    }
}

/// Inner and outer objectives of the meta step.
pub trait Bilevel {
    /// Gradient of the inner loss with respect to `theta`. Quantities the
    /// network update treats as constants (match weights, soft-label
    /// teachers) must still depend on `theta` and `pi` in the graph.
    fn inner_grad(&self, graph: &Graph, theta: &[Tensor], pi: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>>;

    fn task_loss(&self, theta: &[Tensor]) -> Result<Tensor>;
}

fn descend(theta: &[Tensor], grads: &[Tensor], eta: f64) -> Result<Vec<Tensor>> {
    theta.iter().zip(grads).map(|(t, g)| t.sub(&g.scale(eta))).collect()
}

/// Runs the `K + 1` unrolled steps on `graph` and returns the final task loss.
pub fn unroll<P: Bilevel + ?Sized>(
    problem: &P,
    graph: &Graph,
    theta: Vec<Tensor>,
    pi: &[Tensor],
    cfg: &MetaLoopConfig,
    create_graph: bool,
) -> Result<Tensor> {
    let mut theta = theta;
    for _ in 0..cfg.k_inner {
        let g = problem.inner_grad(graph, &theta, pi, create_graph)?;
        theta = descend(&theta, &g, cfg.eta)?;
    }
    let task = problem.task_loss(&theta)?;
    let refs: Vec<&Tensor> = theta.iter().collect();
    let g = graph.grad(&task, None, &refs, create_graph)?;
    theta = descend(&theta, &g, cfg.eta)?;
    problem.task_loss(&theta)
}

/// Exact hypergradient `d task(theta_{K+1}) / d pi` and the task loss value.
pub fn hypergradient<P: Bilevel + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    pi: &[Tensor],
    cfg: &MetaLoopConfig,
) -> Result<(Vec<Tensor>, f64)> {
    let graph = Graph::new();
    let pi_leaves: Vec<Tensor> = pi.iter().map(|p| graph.leaf(p.detach())).collect();
    let theta_leaves: Vec<Tensor> = theta.iter().map(|t| graph.leaf(t.detach())).collect();
    let loss = unroll(problem, &graph, theta_leaves, &pi_leaves, cfg, true)?;
    let refs: Vec<&Tensor> = pi_leaves.iter().collect();
    let grads = graph.grad(&loss, None, &refs, false)?;
    Ok((grads, loss.item()))
}

/// Task loss after the unrolled steps, as a plain value.
pub fn unrolled_task_loss<P: Bilevel + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    pi: &[Tensor],
    cfg: &MetaLoopConfig,
) -> Result<f64> {
    let graph = Graph::new();
    let theta_leaves: Vec<Tensor> = theta.iter().map(|t| graph.leaf(t.detach())).collect();
    let pi: Vec<Tensor> = pi.iter().map(Tensor::detach).collect();
    Ok(unroll(problem, &graph, theta_leaves, &pi, cfg, false)?.item())
}

/// Central-difference hypergradient, one task-loss pair per meta parameter entry.
pub fn finite_difference_hypergradient<P: Bilevel + ?Sized>(
    problem: &P,
    theta: &[Tensor],
    pi: &[Tensor],
    cfg: &MetaLoopConfig,
) -> Result<Vec<Tensor>> {
    let h = cfg.fd_step;
    let mut out = Vec::with_capacity(pi.len());
    for (i, p) in pi.iter().enumerate() {
        let mut grad = Vec::with_capacity(p.numel());
        for j in 0..p.numel() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = p.to_vec();
                data[j] += delta;
                let mut moved: Vec<Tensor> = pi.to_vec();
                moved[i] = Tensor::from_vec(data, p.shape())?;
                unrolled_task_loss(problem, theta, &moved, cfg)
            };
            grad.push((shifted(h)? - shifted(-h)?) / (2.0 * h));
        }
        out.push(Tensor::from_vec(grad, p.shape())?);
    }
    Ok(out)
}

/// Outcome of one meta step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaReport {
    pub hypergradient_norm: f64,
    pub task_loss: f64,
    pub applied: bool,
}

/// Updates `meta_params` by one hypergradient step. `theta` is read only.
pub fn meta_step<P: Bilevel + ?Sized>(
    problem: &P,
    theta: &ParamStore,
    meta_params: &mut ParamStore,
    cfg: &MetaLoopConfig,
    lr: f64,
) -> Result<MetaReport> {
    cfg.validate()?;
    let theta_values = theta.bind(None);
    let pi_values = meta_params.bind(None);
    let (grads, task_loss) = if cfg.finite_difference {
        let g = finite_difference_hypergradient(problem, &theta_values, &pi_values, cfg)?;
        let loss = unrolled_task_loss(problem, &theta_values, &pi_values, cfg)?;
        (g, loss)
    } else {
        hypergradient(problem, &theta_values, &pi_values, cfg)?
    };
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
    if !norm.is_finite() {
        log::warn!("non-finite hypergradient (norm {norm}); meta update skipped");
        return Ok(MetaReport {
            hypergradient_norm: norm,
            task_loss,
            applied: false,
        });
    }
    for (p, g) in meta_params.iter_mut().zip(&grads) {
        for (v, d) in p.data.iter_mut().zip(g.data()) {
            *v -= lr * d;
        }
    }
    Ok(MetaReport {
        hypergradient_norm: norm,
        task_loss,
        applied: true,
    })
}

/// The cohort's meta problem on one fixed batch.
///
/// The inner loss is the weighted layer-wise loss; the task loss is the
/// cross-entropy over every branch classifier.
pub struct CohortProblem<'a> {
    pub cohort: &'a Cohort,
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    pub ids: SampleIds,
    pub index: &'a ContrastiveIndex,
    /// Memory-bank rows per (network, stage); `None` for in-batch mining.
    pub bank_sources: Option<&'a [Vec<Embeddings>]>,
    pub tau: f64,
    pub weights: MclWeights,
    pub switches: TermSwitches,
}

impl Bilevel for CohortProblem<'_> {
    /// Partial gradient with respect to a student copy of `theta`: match
    /// weights and soft-label teachers are computed from `theta` itself, so
    /// they act as constants here but stay differentiable for the hypergradient.
    fn inner_grad(&self, graph: &Graph, theta: &[Tensor], pi: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        let student: Vec<Tensor> = theta.iter().map(|t| t.affine(1.0, 0.0)).collect();
        let teacher_out = self.cohort.forward(theta, self.x)?;
        let teacher = cohort_embeddings(&teacher_out, &self.ids)?;
        let student_out = self.cohort.forward(&student, self.x)?;
        let anchors = cohort_embeddings(&student_out, &self.ids)?;
        let v: Vec<Vec<Tensor>> = teacher
            .iter()
            .map(|s| s.iter().map(|e| e.values.clone()).collect())
            .collect();
        let lambda = MatchWeights::learned(&self.cohort.meta, pi, &v)?;
        let student_view = CohortView {
            anchors: &anchors,
            sources: self.bank_sources.unwrap_or(&anchors),
        };
        let teacher_view = CohortView {
            anchors: &teacher,
            sources: self.bank_sources.unwrap_or(&teacher),
        };
        let losses = pair_losses(
            student_view,
            Some(teacher_view),
            self.index,
            self.tau,
            &lambda.pairs(),
            self.weights,
            self.switches,
            None,
        )?;
        let loss = weighted_sum(&losses, &lambda)?;
        let refs: Vec<&Tensor> = student.iter().collect();
        graph.grad(&loss, None, &refs, create_graph)
    }

    fn task_loss(&self, theta: &[Tensor]) -> Result<Tensor> {
        let outputs = self.cohort.forward(theta, self.x)?;
        let logits: Vec<Vec<Tensor>> = outputs.into_iter().map(|o| o.logits).collect();
        branch_task_loss(&logits, self.labels)
    }
}
