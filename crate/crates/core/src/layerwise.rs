//! Layer-to-layer mutual contrastive learning.
//!
//! Every unordered network pair `(a, b)` and every stage pair `(la, lb)`
//! contributes a mutual contrastive term, scaled per anchor by a match
//! weight. The weight is fixed by the matching mode or produced by the
//! meta-network.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::contrastive::{
    AnchorLoss, ContrastiveIndex, Embeddings, MclWeights, PairDistributions, SampleIds, SimilarityCounter, SourceTag,
    TermSwitches,
};
use crate::error::{Error, Result};
use crate::nn::{MetaNetwork, StageOutputs};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// Stage `l` of one network only matches stage `l` of its peer.
    OneToOne,
    /// Every stage pair with weight 1.
    AllToAll,
    /// Every stage pair with learned per-sample weights.
    #[default]
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerPair {
    pub a: usize,
    pub b: usize,
    pub la: usize,
    pub lb: usize,
}

/// Pairs that carry a loss term under `mode`, with `a < b`.
pub fn layer_pairs(mode: MatchMode, networks: usize, stages: usize) -> Vec<LayerPair> {
    let mut out = Vec::new();
    for a in 0..networks {
        for b in a + 1..networks {
            for la in 0..stages {
                for lb in 0..stages {
                    if mode != MatchMode::OneToOne || la == lb {
                        out.push(LayerPair { a, b, la, lb });
                    }
                }
            }
        }
    }
    out
}

/// `sigmoid(normalize(v_a xi_a) . normalize(v_b xi_b))` per row.
pub fn match_weight(xi_a: &Tensor, xi_b: &Tensor, v_a: &Tensor, v_b: &Tensor) -> Result<Tensor> {
    if v_a.shape() != v_b.shape() {
        return Err(Error::shape("match weight", &[v_a.shape(), v_b.shape()]));
    }
    let pa = v_a.matmul(xi_a)?.l2_normalize_rows()?;
    let pb = v_b.matmul(xi_b)?.l2_normalize_rows()?;
    Ok(pa.row_dot(&pb)?.sigmoid())
}

/// Per-anchor weight `[B]` for every active layer pair.
#[derive(Clone, Debug)]
pub struct MatchWeights {
    mode: MatchMode,
    anchors: usize,
    entries: Vec<(LayerPair, Tensor)>,
}

impl MatchWeights {
    /// Constant weights of the one-to-one and all-to-all modes.
    pub fn fixed(mode: MatchMode, networks: usize, stages: usize, anchors: usize) -> Result<Self> {
        if mode == MatchMode::Weighted {
            return Err(Error::invalid("match weights", "weighted mode needs the meta-network"));
        }
        let ones = Tensor::ones(&[anchors]);
        Ok(MatchWeights {
            mode,
            anchors,
            entries: layer_pairs(mode, networks, stages)
                .into_iter()
                .map(|p| (p, ones.clone()))
                .collect(),
        })
    }

    /// Weights from the meta-network applied to `v[m][l]` (normalized embeddings).
    ///
    /// Callers pass detached embeddings for the network update; inside the
    /// meta step they stay attached so the weights track the unrolled parameters.
    pub fn learned(meta: &MetaNetwork, meta_params: &[Tensor], v: &[Vec<Tensor>]) -> Result<Self> {
        let networks = v.len();
        let stages = v.first().map_or(0, Vec::len);
        let anchors = v.first().and_then(|s| s.first()).map_or(0, Tensor::rows);
        let entries = layer_pairs(MatchMode::Weighted, networks, stages)
            .into_iter()
            .map(|p| {
                let mp = meta.find(p.a, p.b, p.la, p.lb).ok_or_else(|| {
                    Error::invalid(
                        "match weights",
                        format!(
                            "meta-network has no projection for networks {}-{} stages {}-{}",
                            p.a, p.b, p.la, p.lb
                        ),
                    )
                })?;
                let w = match_weight(
                    &meta_params[mp.xi_a.0],
                    &meta_params[mp.xi_b.0],
                    &v[p.a][p.la],
                    &v[p.b][p.lb],
                )?;
                Ok((p, w))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MatchWeights {
            mode: MatchMode::Weighted,
            anchors,
            entries,
        })
    }

    /// Explicit per-anchor weights; validated against the cohort when used.
    pub fn from_entries(mode: MatchMode, anchors: usize, entries: Vec<(LayerPair, Tensor)>) -> Self {
        MatchWeights { mode, anchors, entries }
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn anchors(&self) -> usize {
        self.anchors
    }

    pub fn entries(&self) -> &[(LayerPair, Tensor)] {
        &self.entries
    }

    pub fn pairs(&self) -> Vec<LayerPair> {
        self.entries.iter().map(|(p, _)| *p).collect()
    }

    pub fn get(&self, pair: LayerPair) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == pair).map(|(_, w)| w)
    }

    pub fn detach(&self) -> MatchWeights {
        MatchWeights {
            mode: self.mode,
            anchors: self.anchors,
            entries: self.entries.iter().map(|(p, w)| (*p, w.detach())).collect(),
        }
    }

    /// Mean weight of each pair over all anchors.
    pub fn means(&self) -> Vec<(LayerPair, f64)> {
        self.entries
            .iter()
            .map(|(p, w)| (*p, w.data().iter().sum::<f64>() / w.numel().max(1) as f64))
            .collect()
    }

    fn check(&self, networks: usize, stages: usize) -> Result<()> {
        let expected = layer_pairs(self.mode, networks, stages);
        if self.pairs() != expected {
            return Err(Error::invalid(
                "match weights",
                format!(
                    "{} pairs do not match {:?} mode over {networks} networks x {stages} stages",
                    self.entries.len(),
                    self.mode
                ),
            ));
        }
        for (p, w) in &self.entries {
            if w.shape() != [self.anchors] {
                return Err(Error::shape("match weights", &[w.shape(), &[self.anchors]]));
            }
            let ok = match self.mode {
                MatchMode::Weighted => w.data().iter().all(|&x| (0.0..=1.0).contains(&x)),
                _ => w.data().iter().all(|&x| x == 1.0),
            };
            if !ok {
                return Err(Error::invalid(
                    "match weights",
                    format!("weights of {p:?} are out of range for {:?} mode", self.mode),
                ));
            }
        }
        Ok(())
    }
}

/// Unweighted per-anchor mutual contrastive loss of one layer pair.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub pair: LayerPair,
    pub terms: AnchorLoss,
    /// Mean interactive loss over both directions.
    pub icl_mean: f64,
    /// Anchor means of the unscaled terms.
    pub parts: TermMeans,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermMeans {
    pub vcl: f64,
    pub icl: f64,
    pub soft_vcl: f64,
    pub soft_icl: f64,
}

/// Normalized embeddings `[m][l]` of a cohort forward pass.
pub fn cohort_embeddings(outputs: &[StageOutputs], ids: &SampleIds) -> Result<Vec<Vec<Embeddings>>> {
    outputs
        .iter()
        .enumerate()
        .map(|(network, o)| {
            o.embeddings
                .iter()
                .enumerate()
                .map(|(stage, e)| Embeddings::normalized(e, ids.clone(), SourceTag { network, stage }))
                .collect()
        })
        .collect()
}

/// Batch embeddings `anchors[m][l]` and the rows `sources[m][l]` a
/// contrastive index points into.
#[derive(Clone, Copy, Debug)]
pub struct CohortView<'a> {
    pub anchors: &'a [Vec<Embeddings>],
    pub sources: &'a [Vec<Embeddings>],
}

/// Contrastive terms of each listed pair.
///
/// Soft-label teachers are taken from `teacher` when given, otherwise from
/// `student` detached.
#[allow(clippy::too_many_arguments)]
pub fn pair_losses(
    student: CohortView<'_>,
    teacher: Option<CohortView<'_>>,
    index: &ContrastiveIndex,
    tau: f64,
    pairs: &[LayerPair],
    weights: MclWeights,
    switches: TermSwitches,
    counter: Option<&SimilarityCounter>,
) -> Result<Vec<PairLoss>> {
    weights.validate()?;
    if student.anchors.len() != student.sources.len() {
        return Err(Error::invalid(
            "layer-wise loss",
            "anchor and source cohorts differ in size",
        ));
    }
    let dists = |v: CohortView<'_>, p: LayerPair, counter: Option<&SimilarityCounter>| {
        PairDistributions::new(
            &v.anchors[p.a][p.la],
            &v.sources[p.a][p.la],
            &v.anchors[p.b][p.lb],
            &v.sources[p.b][p.lb],
            index,
            tau,
            counter,
        )
    };
    pairs
        .iter()
        .map(|&pair| {
            let own = dists(student, pair, counter)?;
            let terms = match teacher {
                Some(t) => own.terms(Some(&dists(t, pair, None)?))?,
                None => own.terms(None)?,
            };
            let on = |flag: bool, t: &AnchorLoss| if flag { t.mean().item() } else { 0.0 };
            Ok(PairLoss {
                pair,
                terms: terms.combined(weights, switches)?,
                icl_mean: terms.icl_directional_mean,
                parts: TermMeans {
                    vcl: on(switches.vcl, &terms.vcl),
                    icl: on(switches.icl, &terms.icl),
                    soft_vcl: on(switches.soft_vcl, &terms.soft_vcl),
                    soft_icl: on(switches.soft_icl, &terms.soft_icl),
                },
            })
        })
        .collect()
}

/// `sum over pairs of mean_anchor(lambda * loss)`.
pub fn weighted_sum(losses: &[PairLoss], weights: &MatchWeights) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for pl in losses {
        let w = weights
            .get(pl.pair)
            .ok_or_else(|| Error::invalid("match weights", format!("no weight for {:?}", pl.pair)))?;
        total = total.add(&pl.terms.weighted(w)?.mean())?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct LmclOutput {
    pub loss: Tensor,
    pub pairs: Vec<PairLoss>,
}

/// Layer-wise mutual contrastive loss over the cohort.
#[allow(clippy::too_many_arguments)]
pub fn lmcl_loss(
    anchors: &[Vec<Embeddings>],
    sources: &[Vec<Embeddings>],
    index: &ContrastiveIndex,
    tau: f64,
    match_weights: &MatchWeights,
    weights: MclWeights,
    switches: TermSwitches,
    counter: Option<&SimilarityCounter>,
) -> Result<LmclOutput> {
    let networks = anchors.len();
    let stages = anchors.first().map_or(0, Vec::len);
    if anchors.iter().chain(sources).any(|s| s.len() != stages) {
        return Err(Error::invalid("layer-wise loss", "networks differ in stage count"));
    }
    match_weights.check(networks, stages)?;
    if match_weights.anchors() != index.anchors() {
        return Err(Error::shape(
            "match weights",
            &[&[match_weights.anchors()], &[index.anchors()]],
        ));
    }
    let view = CohortView { anchors, sources };
    let pairs = pair_losses(
        view,
        None,
        index,
        tau,
        &match_weights.pairs(),
        weights,
        switches,
        counter,
    )?;
    let loss = weighted_sum(&pairs, match_weights)?;
    Ok(LmclOutput { loss, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::mcl_pair_loss;
    use crate::mining::batch_index;
    use alloc::rc::Rc;
    use alloc::vec;

    fn emb(seed: u64, rows: usize, dim: usize) -> Tensor {
        let data = (0..rows * dim)
            .map(|i| libm::sin(i as f64 * 0.7 + seed as f64 * 1.3))
            .collect();
        Tensor::from_vec(data, &[rows, dim]).unwrap()
    }

    fn setup(networks: usize, stages: usize) -> (Vec<Vec<Embeddings>>, ContrastiveIndex) {
        let ids: SampleIds = Rc::from(vec![0u64, 1, 2, 3, 4, 5]);
        let labels = [0, 0, 1, 1, 2, 2];
        let index = batch_index(&labels, ids.clone()).unwrap();
        let e = (0..networks)
            .map(|m| {
                (0..stages)
                    .map(|l| {
                        Embeddings::normalized(
                            &emb((m * 7 + l) as u64, 6, 4),
                            ids.clone(),
                            SourceTag { network: m, stage: l },
                        )
                        .unwrap()
                    })
                    .collect()
            })
            .collect();
        (e, index)
    }

    #[test]
    fn weight_closed_forms() {
        let id = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let x = Tensor::matrix(&[&[3.0, 4.0]]).unwrap();
        let y = Tensor::matrix(&[&[-4.0, 3.0]]).unwrap();
        let same = match_weight(&id, &id, &x, &x).unwrap().item();
        assert!((same - 0.7310585786300049).abs() < 1e-12);
        let orth = match_weight(&id, &id, &x, &y).unwrap().item();
        assert!((orth - 0.5).abs() < 1e-12);
        let anti = match_weight(&id, &id, &x, &x.neg()).unwrap().item();
        assert!((anti - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn one_to_one_single_stage_is_plain_mcl() {
        let (e, index) = setup(2, 1);
        let w = MclWeights::default();
        let mw = MatchWeights::fixed(MatchMode::OneToOne, 2, 1, 6).unwrap();
        let out = lmcl_loss(&e, &e, &index, 0.1, &mw, w, TermSwitches::ALL, None).unwrap();
        let plain = mcl_pair_loss(&e[0][0], &e[0][0], &e[1][0], &e[1][0], &index, 0.1, w).unwrap();
        assert!((out.loss.item() - plain.item()).abs() < 1e-12);
    }

    #[test]
    fn all_to_all_counts_and_sums_nine_terms() {
        let (e, index) = setup(2, 3);
        let counter = SimilarityCounter::new();
        let mw = MatchWeights::fixed(MatchMode::AllToAll, 2, 3, 6).unwrap();
        let out = lmcl_loss(
            &e,
            &e,
            &index,
            0.1,
            &mw,
            MclWeights::default(),
            TermSwitches::ALL,
            Some(&counter),
        )
        .unwrap();
        assert_eq!(out.pairs.len(), 9);
        let (k1, l, m) = (5u64, 3u64, 2u64);
        assert_eq!(counter.get(), 6 * 2 * k1 * l * l * m * (m - 1));
        let mut manual = 0.0;
        for la in 0..3 {
            for lb in 0..3 {
                manual += mcl_pair_loss(
                    &e[0][la],
                    &e[0][la],
                    &e[1][lb],
                    &e[1][lb],
                    &index,
                    0.1,
                    MclWeights::default(),
                )
                .unwrap()
                .item();
            }
        }
        assert!((out.loss.item() - manual).abs() < 1e-9);
    }

    #[test]
    fn weighted_is_between_zero_and_all_to_all() {
        let (e, index) = setup(2, 2);
        let mut store = crate::nn::ParamStore::new();
        let meta = MetaNetwork::init(&mut store, 3, 2, 2, 4);
        let params = store.bind(None);
        let v: Vec<Vec<Tensor>> = e.iter().map(|s| s.iter().map(|x| x.values.clone()).collect()).collect();
        let learned = MatchWeights::learned(&meta, &params, &v).unwrap();
        assert!(learned.means().iter().all(|(_, m)| *m > 0.0 && *m < 1.0));
        let w = MclWeights::default();
        let weighted = lmcl_loss(&e, &e, &index, 0.1, &learned, w, TermSwitches::ALL, None).unwrap();
        let full = MatchWeights::fixed(MatchMode::AllToAll, 2, 2, 6).unwrap();
        let all = lmcl_loss(&e, &e, &index, 0.1, &full, w, TermSwitches::ALL, None).unwrap();
        assert!(weighted.loss.item() > 0.0);
        assert!(weighted.loss.item() < all.loss.item());
        let forced = weighted_sum(&weighted.pairs, &full).unwrap();
        assert!((forced.item() - all.loss.item()).abs() < 1e-9);
    }

    #[test]
    fn inconsistent_weights_fail() {
        let (e, index) = setup(2, 2);
        let mw = MatchWeights::fixed(MatchMode::OneToOne, 2, 3, 6).unwrap();
        assert!(lmcl_loss(&e, &e, &index, 0.1, &mw, MclWeights::default(), TermSwitches::ALL, None).is_err());
        assert!(MatchWeights::fixed(MatchMode::Weighted, 2, 2, 6).is_err());
        let short = MatchWeights::fixed(MatchMode::AllToAll, 2, 2, 5).unwrap();
        assert!(lmcl_loss(
            &e,
            &e,
            &index,
            0.1,
            &short,
            MclWeights::default(),
            TermSwitches::ALL,
            None
        )
        .is_err());
    }
}
