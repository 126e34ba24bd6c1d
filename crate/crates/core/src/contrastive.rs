//! Vanilla and interactive contrastive distributions, their InfoNCE losses,
//! soft-label mimicry between peers and the pairwise mutual contrastive loss.
//!
//! Everything is batched: a [`ContrastiveIndex`] lists, for each anchor row,
//! the positions of its positive (column 0) and its `K` negatives inside a
//! contrastive source. Distributions are `[B, K+1]` log-probability tensors.
//! Anchors without a usable contrastive set are flagged invalid; their terms
//! are zeroed and averages run over the surviving anchors.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifiers of the samples behind a set of embedding rows.
pub type SampleIds = Rc<[u64]>;

/// Floor applied to student probabilities inside KL divergences.
pub const KL_FLOOR: f64 = 1e-12;

/// Which (network, stage) produced a set of embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SourceTag {
    pub network: usize,
    pub stage: usize,
}

/// Unit-norm embedding rows with the sample ids they came from.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub values: Tensor,
    pub ids: SampleIds,
    pub tag: SourceTag,
}

impl Embeddings {
    /// Normalizes `raw` row-wise.
    pub fn normalized(raw: &Tensor, ids: SampleIds, tag: SourceTag) -> Result<Self> {
        if raw.rows() != ids.len() {
            return Err(Error::shape("embeddings", &[raw.shape(), &[ids.len()]]));
        }
        Ok(Embeddings {
            values: raw.l2_normalize_rows()?,
            ids,
            tag,
        })
    }

    pub fn detach(&self) -> Embeddings {
        Embeddings {
            values: self.values.detach(),
            ids: self.ids.clone(),
            tag: self.tag,
        }
    }
}

fn same_ids(a: &SampleIds, b: &SampleIds) -> bool {
    Rc::ptr_eq(a, b) || a[..] == b[..]
}

/// Per-anchor positions of the positive and the negatives inside a source.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveIndex {
    anchors: usize,
    width: usize,
    positions: Vec<usize>,
    valid: Rc<Vec<bool>>,
    anchor_ids: SampleIds,
    source_ids: SampleIds,
}

impl ContrastiveIndex {
    /// `rows[i]` is `None` for anchors to skip, otherwise `[positive, negatives..]`.
    pub fn new(rows: &[Option<Vec<usize>>], anchor_ids: SampleIds, source_ids: SampleIds) -> Result<Self> {
        if rows.len() != anchor_ids.len() {
            return Err(Error::shape("contrastive index", &[&[rows.len()], &[anchor_ids.len()]]));
        }
        let width = rows.iter().flatten().map(Vec::len).next().unwrap_or(2);
        if width < 2 {
            return Err(Error::invalid("contrastive set", "need at least one negative (K >= 1)"));
        }
        let mut positions = Vec::with_capacity(rows.len() * width);
        let mut valid = Vec::with_capacity(rows.len());
        for row in rows {
            match row {
                Some(r) => {
                    if r.len() != width {
                        return Err(Error::invalid(
                            "contrastive set",
                            format!("ragged rows: {} vs {width}", r.len()),
                        ));
                    }
                    if let Some(&p) = r.iter().find(|&&p| p >= source_ids.len()) {
                        return Err(Error::invalid(
                            "contrastive set",
                            format!("position {p} outside source of {}", source_ids.len()),
                        ));
                    }
                    positions.extend_from_slice(r);
                    valid.push(true);
                }
                None => {
                    positions.extend(core::iter::repeat_n(0, width));
                    valid.push(false);
                }
            }
        }
        Ok(ContrastiveIndex {
            anchors: rows.len(),
            width,
            positions,
            valid: Rc::new(valid),
            anchor_ids,
            source_ids,
        })
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    /// Number of negatives per anchor.
    pub fn negatives(&self) -> usize {
        self.width - 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, anchor: usize) -> &[usize] {
        &self.positions[anchor * self.width..(anchor + 1) * self.width]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn anchor_ids(&self) -> &SampleIds {
        &self.anchor_ids
    }

    pub fn source_ids(&self) -> &SampleIds {
        &self.source_ids
    }
}

/// Counts similarity evaluations (dot products) entering contrastive distributions.
#[derive(Debug, Default)]
pub struct SimilarityCounter(Cell<u64>);

impl SimilarityCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    fn add(&self, n: usize) {
        self.0.set(self.0.get() + n as u64);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Anchor and contrastives from the same (network, stage).
    Vanilla(SourceTag),
    /// Anchor from `from`, contrastives from `to`.
    Interactive { from: SourceTag, to: SourceTag },
}

/// Batched `(K+1)`-way contrastive distribution; column 0 is the positive.
#[derive(Clone, Debug)]
pub struct ContrastiveDistribution {
    pub log_probs: Tensor,
    pub tau: f64,
    pub direction: Direction,
    valid: Rc<Vec<bool>>,
}

impl ContrastiveDistribution {
    pub fn probs(&self) -> Tensor {
        self.log_probs.exp()
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn anchors(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn width(&self) -> usize {
        self.log_probs.cols()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("temperature", format!("{tau} (must be > 0)")));
    }
    Ok(())
}

fn check_pairing(anchors: &Embeddings, source: &Embeddings, index: &ContrastiveIndex) -> Result<()> {
    if !same_ids(&anchors.ids, &index.anchor_ids) {
        return Err(Error::SampleMismatch {
            detail: format!("anchor rows of {:?} are not the indexed anchors", anchors.tag),
        });
    }
    if !same_ids(&source.ids, &index.source_ids) {
        return Err(Error::SampleMismatch {
            detail: format!("contrastive rows of {:?} are not the indexed samples", source.tag),
        });
    }
    Ok(())
}

/// `[B, K+1]` matrix of `anchor . contrastive / tau`.
fn similarity_logits(
    anchors: &Tensor,
    source: &Tensor,
    index: &ContrastiveIndex,
    tau: f64,
    counter: Option<&SimilarityCounter>,
) -> Result<Tensor> {
    let (b, w) = (index.anchors, index.width);
    let n = source.rows();
    if anchors.cols() != source.cols() {
        return Err(Error::shape("similarity", &[anchors.shape(), source.shape()]));
    }
    let logits = if n <= 2 * w {
        let sims = anchors.matmul(&source.t()?)?;
        let idx = (0..b)
            .flat_map(|i| index.row(i).iter().map(move |&p| i * n + p))
            .collect();
        sims.take(idx, &[b, w])?
    } else {
        let picked = source.gather_rows(&index.positions)?;
        let repeated: Vec<usize> = (0..b).flat_map(|i| core::iter::repeat_n(i, w)).collect();
        let rep = anchors.gather_rows(&repeated)?;
        rep.row_dot(&picked)?.reshape(&[b, w])?
    };
    if let Some(c) = counter {
        c.add(b * w);
    }
    Ok(logits.scale(1.0 / tau))
}

/// Softmax over `anchor . v / tau` for contrastives from the anchor's own (network, stage).
pub fn vcl_distribution(
    anchors: &Embeddings,
    source: &Embeddings,
    index: &ContrastiveIndex,
    tau: f64,
    counter: Option<&SimilarityCounter>,
) -> Result<ContrastiveDistribution> {
    check_tau(tau)?;
    if anchors.tag != source.tag {
        return Err(Error::invalid(
            "vanilla contrastive pairing",
            format!("anchor {:?} vs contrastives {:?}", anchors.tag, source.tag),
        ));
    }
    check_pairing(anchors, source, index)?;
    let logits = similarity_logits(&anchors.values, &source.values, index, tau, counter)?;
    Ok(ContrastiveDistribution {
        log_probs: logits.log_softmax_rows()?,
        tau,
        direction: Direction::Vanilla(anchors.tag),
        valid: index.valid.clone(),
    })
}

/// Softmax over cross-network similarities: anchors from one network,
/// contrastives from a peer, both over the same samples.
pub fn icl_distribution(
    anchors: &Embeddings,
    source: &Embeddings,
    index: &ContrastiveIndex,
    tau: f64,
    counter: Option<&SimilarityCounter>,
) -> Result<ContrastiveDistribution> {
    check_tau(tau)?;
    check_pairing(anchors, source, index)?;
    let logits = similarity_logits(&anchors.values, &source.values, index, tau, counter)?;
    Ok(ContrastiveDistribution {
        log_probs: logits.log_softmax_rows()?,
        tau,
        direction: Direction::Interactive {
            from: anchors.tag,
            to: source.tag,
        },
        valid: index.valid.clone(),
    })
}

/// Per-anchor loss values; skipped anchors hold zero.
#[derive(Clone, Debug)]
pub struct AnchorLoss {
    pub values: Tensor,
    valid: Rc<Vec<bool>>,
}

impl AnchorLoss {
    fn masked(values: Tensor, valid: Rc<Vec<bool>>) -> Result<Self> {
        let mask: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let values = values.mul(&Tensor::vector(&mask))?;
        Ok(AnchorLoss { values, valid })
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mean over surviving anchors (zero when none survive).
    pub fn mean(&self) -> Tensor {
        match self.valid_count() {
            0 => Tensor::scalar(0.0),
            n => self.values.sum().scale(1.0 / n as f64),
        }
    }

    pub fn add(&self, other: &AnchorLoss) -> Result<AnchorLoss> {
        Ok(AnchorLoss {
            values: self.values.add(&other.values)?,
            valid: self.valid.clone(),
        })
    }

    pub fn scale(&self, s: f64) -> AnchorLoss {
        AnchorLoss {
            values: self.values.scale(s),
            valid: self.valid.clone(),
        }
    }

    /// Multiplies each anchor's loss by its weight (`[B]`).
    pub fn weighted(&self, weights: &Tensor) -> Result<AnchorLoss> {
        Ok(AnchorLoss {
            values: self.values.mul(weights)?,
            valid: self.valid.clone(),
        })
    }
}

/// InfoNCE: `-log p[positive]` per anchor. Serves both vanilla and interactive
/// distributions.
pub fn info_nce(dist: &ContrastiveDistribution) -> Result<AnchorLoss> {
    let (b, w) = (dist.anchors(), dist.width());
    let positive = dist.log_probs.take((0..b).map(|i| i * w).collect(), &[b])?;
    AnchorLoss::masked(positive.neg(), dist.valid.clone())
}

/// Scalar vanilla contrastive loss of one network, averaged over anchors.
pub fn vcl_loss(dist: &ContrastiveDistribution) -> Result<Tensor> {
    Ok(info_nce(dist)?.mean())
}

/// Sum of per-network vanilla losses.
pub fn vcl_cohort_loss(dists: &[ContrastiveDistribution]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for d in dists {
        total = total.add(&vcl_loss(d)?)?;
    }
    Ok(total)
}

/// `KL(detach(teacher) || student)` per anchor, with the student floored at [`KL_FLOOR`].
pub fn soft_kl(teacher: &ContrastiveDistribution, student: &ContrastiveDistribution) -> Result<AnchorLoss> {
    soft_kl_with(teacher, &teacher.probs().detach(), student)
}

/// KL against given teacher probabilities. The student gradient treats
/// `p` as a constant weight even when `p` is attached to the graph.
fn soft_kl_with(
    teacher: &ContrastiveDistribution,
    p: &Tensor,
    student: &ContrastiveDistribution,
) -> Result<AnchorLoss> {
    if teacher.log_probs.shape() != student.log_probs.shape() {
        return Err(Error::shape(
            "soft label",
            &[teacher.log_probs.shape(), student.log_probs.shape()],
        ));
    }
    let (b, w) = (student.anchors(), student.width());
    let entropy_part: Vec<f64> = p
        .data()
        .chunks(w)
        .map(|row| row.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum())
        .collect();
    let cross = p.row_dot(&student.log_probs.clamp_min(libm::log(KL_FLOOR)))?;
    let kl = Tensor::vector(&entropy_part).sub(&cross)?;
    let valid: Vec<bool> = teacher
        .valid
        .iter()
        .zip(student.valid.iter())
        .map(|(&a, &b)| a && b)
        .collect();
    debug_assert_eq!(valid.len(), b);
    AnchorLoss::masked(kl, Rc::new(valid))
}

/// Soft vanilla mimicry over a cohort: `sum_m sum_{l != m} KL(p_l || p_m)`.
pub fn soft_vcl_loss(dists: &[ContrastiveDistribution]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for (m, student) in dists.iter().enumerate() {
        for (l, teacher) in dists.iter().enumerate() {
            if l != m {
                total = total.add(&soft_kl(teacher, student)?.mean())?;
            }
        }
    }
    Ok(total)
}

/// Interactive distributions `q[a -> b]` for every ordered pair of networks.
#[derive(Clone, Debug)]
pub struct InteractiveSet {
    size: usize,
    entries: Vec<Option<ContrastiveDistribution>>,
}

impl InteractiveSet {
    pub fn new(size: usize) -> Self {
        InteractiveSet {
            size,
            entries: vec![None; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn insert(&mut self, a: usize, b: usize, dist: ContrastiveDistribution) {
        self.entries[a * self.size + b] = Some(dist);
    }

    pub fn get(&self, a: usize, b: usize) -> Result<&ContrastiveDistribution> {
        self.entries
            .get(a * self.size + b)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::invalid("interactive set", format!("missing q[{a}->{b}]")))
    }
}

fn require_pairs(q: &InteractiveSet) -> Result<()> {
    if q.size < 2 {
        return Err(Error::invalid("cohort", "mutual learning needs at least two networks"));
    }
    Ok(())
}

/// `sum_{a<b} (L[a->b] + L[b->a])`; each directional term is averaged over anchors.
pub fn icl_loss_pairwise(q: &InteractiveSet) -> Result<Tensor> {
    require_pairs(q)?;
    let mut total = Tensor::scalar(0.0);
    for a in 0..q.size {
        for b in a + 1..q.size {
            total = total.add(&info_nce(q.get(a, b)?)?.mean())?;
            total = total.add(&info_nce(q.get(b, a)?)?.mean())?;
        }
    }
    Ok(total)
}

/// `sum_a sum_{b != a} KL(q[b->a] || q[a->b])` with the teacher side detached.
pub fn soft_icl_loss(q: &InteractiveSet) -> Result<Tensor> {
    require_pairs(q)?;
    let mut total = Tensor::scalar(0.0);
    for a in 0..q.size {
        for b in 0..q.size {
            if a != b {
                total = total.add(&soft_kl(q.get(b, a)?, q.get(a, b)?)?.mean())?;
            }
        }
    }
    Ok(total)
}

/// Weights of the hard (cross-entropy) and soft (KL) contrastive terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MclWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MclWeights {
    fn default() -> Self {
        MclWeights { alpha: 0.1, beta: 1.0 }
    }
}

impl MclWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::invalid(
                "loss weights",
                format!("alpha={} beta={} (must be >= 0)", self.alpha, self.beta),
            ));
        }
        Ok(())
    }
}

/// Which contrastive terms participate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermSwitches {
    pub vcl: bool,
    pub icl: bool,
    pub soft_vcl: bool,
    pub soft_icl: bool,
}

impl Default for TermSwitches {
    fn default() -> Self {
        TermSwitches::ALL
    }
}

impl TermSwitches {
    pub const ALL: TermSwitches = TermSwitches {
        vcl: true,
        icl: true,
        soft_vcl: true,
        soft_icl: true,
    };

    pub fn any(&self) -> bool {
        self.vcl || self.icl || self.soft_vcl || self.soft_icl
    }
}

/// Per-anchor components of the mutual contrastive loss between two embedding groups.
#[derive(Clone, Debug)]
pub struct PairTerms {
    /// `VCL_a + VCL_b`.
    pub vcl: AnchorLoss,
    /// `ICL[a->b] + ICL[b->a]`.
    pub icl: AnchorLoss,
    /// `KL(p_b || p_a) + KL(p_a || p_b)`.
    pub soft_vcl: AnchorLoss,
    /// `KL(q[b->a] || q[a->b]) + KL(q[a->b] || q[b->a])`.
    pub soft_icl: AnchorLoss,
    /// Mean interactive loss of the two directions, for the mutual-information bound.
    pub icl_directional_mean: f64,
}

impl PairTerms {
    /// `alpha (vcl + icl) + beta (soft_vcl + soft_icl)` per anchor, honoring `switches`.
    pub fn combined(&self, w: MclWeights, switches: TermSwitches) -> Result<AnchorLoss> {
        let zero = self.vcl.scale(0.0);
        let pick = |on: bool, t: &AnchorLoss| if on { t.clone() } else { zero.clone() };
        let hard = pick(switches.vcl, &self.vcl).add(&pick(switches.icl, &self.icl))?;
        let soft = pick(switches.soft_vcl, &self.soft_vcl).add(&pick(switches.soft_icl, &self.soft_icl))?;
        hard.scale(w.alpha).add(&soft.scale(w.beta))
    }
}

/// The four contrastive distributions of a network pair.
#[derive(Clone, Debug)]
pub struct PairDistributions {
    pub p_a: ContrastiveDistribution,
    pub p_b: ContrastiveDistribution,
    pub q_ab: ContrastiveDistribution,
    pub q_ba: ContrastiveDistribution,
}

impl PairDistributions {
    /// `anchor_x` / `source_x` are the embeddings of one side at the anchors
    /// and at the indexed contrastive rows (the same tensor for in-batch mining).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        anchor_a: &Embeddings,
        source_a: &Embeddings,
        anchor_b: &Embeddings,
        source_b: &Embeddings,
        index: &ContrastiveIndex,
        tau: f64,
        counter: Option<&SimilarityCounter>,
    ) -> Result<Self> {
        Ok(PairDistributions {
            p_a: vcl_distribution(anchor_a, source_a, index, tau, counter)?,
            p_b: vcl_distribution(anchor_b, source_b, index, tau, counter)?,
            q_ab: icl_distribution(anchor_a, source_b, index, tau, counter)?,
            q_ba: icl_distribution(anchor_b, source_a, index, tau, counter)?,
        })
    }

    /// Per-anchor terms. Soft-label teachers come from `teacher` when given
    /// (kept attached, used as constants for the student gradient) and are
    /// otherwise these distributions, detached.
    pub fn terms(&self, teacher: Option<&PairDistributions>) -> Result<PairTerms> {
        let kl = |t: &ContrastiveDistribution, s: &ContrastiveDistribution| match teacher {
            Some(_) => soft_kl_with(t, &t.probs(), s),
            None => soft_kl(t, s),
        };
        let t = teacher.unwrap_or(self);
        let icl_ab = info_nce(&self.q_ab)?;
        let icl_ba = info_nce(&self.q_ba)?;
        let icl_directional_mean = 0.5 * (icl_ab.mean().item() + icl_ba.mean().item());
        Ok(PairTerms {
            vcl: info_nce(&self.p_a)?.add(&info_nce(&self.p_b)?)?,
            icl: icl_ab.add(&icl_ba)?,
            soft_vcl: kl(&t.p_b, &self.p_a)?.add(&kl(&t.p_a, &self.p_b)?)?,
            soft_icl: kl(&t.q_ba, &self.q_ab)?.add(&kl(&t.q_ab, &self.q_ba)?)?,
            icl_directional_mean,
        })
    }
}

/// Computes the four distributions of a pair and their per-anchor terms.
pub fn mcl_pair_terms(
    anchor_a: &Embeddings,
    source_a: &Embeddings,
    anchor_b: &Embeddings,
    source_b: &Embeddings,
    index: &ContrastiveIndex,
    tau: f64,
    counter: Option<&SimilarityCounter>,
) -> Result<PairTerms> {
    PairDistributions::new(anchor_a, source_a, anchor_b, source_b, index, tau, counter)?.terms(None)
}

/// Mutual contrastive loss between two embedding groups, averaged over anchors.
#[allow(clippy::too_many_arguments)]
pub fn mcl_pair_loss(
    anchor_a: &Embeddings,
    source_a: &Embeddings,
    anchor_b: &Embeddings,
    source_b: &Embeddings,
    index: &ContrastiveIndex,
    tau: f64,
    weights: MclWeights,
) -> Result<Tensor> {
    weights.validate()?;
    let terms = mcl_pair_terms(anchor_a, source_a, anchor_b, source_b, index, tau, None)?;
    Ok(terms.combined(weights, TermSwitches::ALL)?.mean())
}

/// `ln K - mean interactive loss`, the mutual-information lower bound.
pub fn mi_bound(mean_icl_loss: f64, negatives: usize) -> f64 {
    libm::log(negatives as f64) - mean_icl_loss
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(network: usize) -> SourceTag {
        SourceTag { network, stage: 0 }
    }

    fn ids(n: usize, offset: u64) -> SampleIds {
        (0..n as u64).map(|i| i + offset).collect::<Vec<_>>().into()
    }

    fn emb(rows: &[&[f64]], ids: SampleIds, t: SourceTag) -> Embeddings {
        Embeddings {
            values: Tensor::matrix(rows).unwrap(),
            ids,
            tag: t,
        }
    }

    /// One anchor, contrastives given explicitly in a separate source.
    fn single(anchor: &[f64], contrastives: &[&[f64]]) -> (Embeddings, Embeddings, ContrastiveIndex) {
        let a_ids = ids(1, 100);
        let s_ids = ids(contrastives.len(), 0);
        let index =
            ContrastiveIndex::new(&[Some((0..contrastives.len()).collect())], a_ids.clone(), s_ids.clone()).unwrap();
        (emb(&[anchor], a_ids, tag(0)), emb(contrastives, s_ids, tag(0)), index)
    }

    #[test]
    fn vanilla_two_way_closed_form() {
        let (a, s, idx) = single(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = vcl_distribution(&a, &s, &idx, 1.0, None).unwrap();
        let p = d.probs();
        assert!((p.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((vcl_loss(&d).unwrap().item() - 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn identical_contrastives_are_uniform() {
        let (a, s, idx) = single(&[0.6, 0.8], &[&[0.0, 1.0], &[0.0, 1.0], &[0.0, 1.0]]);
        let d = vcl_distribution(&a, &s, &idx, 0.1, None).unwrap();
        assert!(d.probs().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn small_temperature_concentrates_on_positive() {
        let (a, s, idx) = single(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]]);
        let d = vcl_distribution(&a, &s, &idx, 0.01, None).unwrap();
        assert!(d.probs().data()[0] > 1.0 - 1e-40_f64.max(1e-12));
        assert!(vcl_loss(&d).unwrap().item() < 1e-12);
    }

    #[test]
    fn uniform_over_127_is_ln_127() {
        let rows: Vec<Vec<f64>> = vec![vec![0.0, 1.0]; 127];
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (a, s, idx) = single(&[1.0, 0.0], &refs);
        let d = vcl_distribution(&a, &s, &idx, 0.1, None).unwrap();
        assert!((vcl_loss(&d).unwrap().item() - 4.844_187_086_458_591).abs() < 1e-12);
    }

    #[test]
    fn interactive_closed_form_and_orthogonal_case() {
        let a_ids = ids(1, 100);
        let s_ids = ids(2, 0);
        let idx = ContrastiveIndex::new(&[Some(vec![0, 1])], a_ids.clone(), s_ids.clone()).unwrap();
        let anchor = emb(&[&[1.0, 0.0]], a_ids.clone(), tag(0));
        let peer = emb(&[&[0.6, 0.8], &[0.0, 1.0]], s_ids.clone(), tag(1));
        let q = icl_distribution(&anchor, &peer, &idx, 1.0, None).unwrap();
        assert!((q.probs().data()[0] - 0.645_656_306_225_795_4).abs() < 1e-12);
        let ortho = emb(&[&[0.0, 1.0], &[0.0, -1.0]], s_ids, tag(1));
        let q = icl_distribution(&anchor, &ortho, &idx, 1.0, None).unwrap();
        assert!(q.probs().data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn interactive_rejects_mismatched_samples() {
        let a_ids = ids(1, 100);
        let idx = ContrastiveIndex::new(&[Some(vec![0, 1])], a_ids.clone(), ids(2, 0)).unwrap();
        let anchor = emb(&[&[1.0, 0.0]], a_ids, tag(0));
        let peer = emb(&[&[0.6, 0.8], &[0.0, 1.0]], ids(2, 50), tag(1));
        assert!(matches!(
            icl_distribution(&anchor, &peer, &idx, 1.0, None),
            Err(Error::SampleMismatch { .. })
        ));
    }

    #[test]
    fn empty_negatives_and_bad_temperature_fail() {
        assert!(ContrastiveIndex::new(&[Some(vec![0])], ids(1, 9), ids(1, 0)).is_err());
        let (a, s, idx) = single(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(vcl_distribution(&a, &s, &idx, 0.0, None).is_err());
        assert!(vcl_distribution(&a, &s, &idx, -1.0, None).is_err());
    }

    fn two_way(p: f64) -> ContrastiveDistribution {
        let lp = Tensor::matrix(&[&[libm::log(p), libm::log(1.0 - p)]]).unwrap();
        ContrastiveDistribution {
            log_probs: lp,
            tau: 1.0,
            direction: Direction::Vanilla(tag(0)),
            valid: Rc::new(vec![true]),
        }
    }

    #[test]
    fn soft_vcl_closed_form() {
        let loss = soft_vcl_loss(&[two_way(0.75), two_way(0.5)]).unwrap().item();
        // KL(p2||p1) + KL(p1||p2), computed independently.
        assert!((loss - 0.274_653_072_167_027_4).abs() < 1e-12, "{loss}");
        let same = soft_vcl_loss(&[two_way(0.3), two_way(0.3)]).unwrap().item();
        assert!(same.abs() < 1e-15);
    }

    #[test]
    fn soft_vcl_rejects_length_mismatch() {
        let mut other = two_way(0.5);
        other.log_probs = Tensor::matrix(&[&[-1.0986, -1.0986, -1.0986]]).unwrap();
        assert!(soft_vcl_loss(&[two_way(0.5), other]).is_err());
    }

    #[test]
    fn pairwise_needs_two_networks() {
        assert!(icl_loss_pairwise(&InteractiveSet::new(1)).is_err());
        assert!(soft_icl_loss(&InteractiveSet::new(1)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_and_negative_weights_fail() {
        let (a, s, idx) = single(&[1.0, 0.0], &[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = MclWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(mcl_pair_loss(&a, &s, &a, &s, &idx, 0.1, w).unwrap().item(), 0.0);
        let w = MclWeights { alpha: -0.1, beta: 1.0 };
        assert!(mcl_pair_loss(&a, &s, &a, &s, &idx, 0.1, w).is_err());
    }

    #[test]
    fn skipped_anchor_drops_out_of_the_mean() {
        let a_ids = ids(2, 100);
        let s_ids = ids(2, 0);
        let idx = ContrastiveIndex::new(&[Some(vec![0, 1]), None], a_ids.clone(), s_ids.clone()).unwrap();
        let anchors = emb(&[&[1.0, 0.0], &[0.0, 1.0]], a_ids, tag(0));
        let src = emb(&[&[1.0, 0.0], &[0.0, 1.0]], s_ids, tag(0));
        let d = vcl_distribution(&anchors, &src, &idx, 1.0, None).unwrap();
        assert!((vcl_loss(&d).unwrap().item() - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert_eq!(info_nce(&d).unwrap().values.data()[1], 0.0);
    }

    #[test]
    fn mi_bound_values() {
        assert!((mi_bound(libm::log(9.0), 8) - (-0.117_783_035_656_383_82)).abs() < 1e-12);
        assert!((mi_bound(0.0, 8192) - 9.010_913_347_279_288).abs() < 1e-12);
    }
}
