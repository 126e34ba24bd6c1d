//! Contrastive sample selection.
//!
//! Batch mining draws class-aware mini-batches (B/2 classes, two samples
//! each) so every anchor has exactly one in-batch positive and B-2
//! negatives. Memory mining keeps a FIFO bank of past embeddings per
//! (network, stage) and retrieves one positive and K negatives per anchor.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::contrastive::{ContrastiveIndex, Embeddings, SampleIds, SourceTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dataset indices of a class-aware batch; samples `2j` and `2j+1` share a class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassAwareBatch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ClassAwareBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Draws class-aware batches from a fixed label vector.
#[derive(Clone, Debug)]
pub struct ClassAwareSampler {
    by_class: Vec<Vec<usize>>,
}

impl ClassAwareSampler {
    pub fn new(labels: &[usize]) -> Self {
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        ClassAwareSampler { by_class }
    }

    /// Uniform over eligible class subsets, then over sample pairs within each class.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<ClassAwareBatch> {
        if batch_size < 4 || !batch_size.is_multiple_of(2) {
            return Err(Error::Infeasible {
                detail: format!("batch size {batch_size} must be even and at least 4"),
            });
        }
        let eligible: Vec<usize> = (0..self.by_class.len())
            .filter(|&c| self.by_class[c].len() >= 2)
            .collect();
        let needed = batch_size / 2;
        if eligible.len() < needed {
            let limiting = (0..self.by_class.len()).find(|&c| self.by_class[c].len() < 2);
            let detail = match limiting {
                Some(c) => format!(
                    "batch size {batch_size} needs {needed} classes with two samples; class {c} has {}",
                    self.by_class[c].len()
                ),
                None => format!(
                    "batch size {batch_size} needs {needed} classes; dataset has {}",
                    self.by_class.len()
                ),
            };
            return Err(Error::Infeasible { detail });
        }
        let mut indices = Vec::with_capacity(batch_size);
        let mut labels = Vec::with_capacity(batch_size);
        for pick in index::sample(rng, eligible.len(), needed) {
            let c = eligible[pick];
            let members = &self.by_class[c];
            for j in index::sample(rng, members.len(), 2) {
                indices.push(members[j]);
                labels.push(c);
            }
        }
        Ok(ClassAwareBatch { indices, labels })
    }
}

/// In-batch contrastive index: the positive is the other same-class sample,
/// the negatives are all remaining samples in batch order.
pub fn batch_index(labels: &[usize], ids: SampleIds) -> Result<ContrastiveIndex> {
    if labels.len() != ids.len() {
        return Err(Error::shape("batch index", &[&[labels.len()], &[ids.len()]]));
    }
    let rows: Vec<Option<Vec<usize>>> = (0..labels.len())
        .map(|i| {
            let positives: Vec<usize> = (0..labels.len())
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if positives.len() != 1 {
                return Err(Error::invalid(
                    "batch layout",
                    format!("anchor {i} has {} in-batch positives, expected 1", positives.len()),
                ));
            }
            let mut row = positives;
            row.extend((0..labels.len()).filter(|&j| labels[j] != labels[i]));
            Ok(Some(row))
        })
        .collect::<Result<_>>()?;
    ContrastiveIndex::new(&rows, ids.clone(), ids)
}

/// Outcome of drawing a contrastive set for one anchor from a bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Retrieval {
    Found {
        positive: usize,
        negatives: Vec<usize>,
        /// Fewer than K different-label entries existed; negatives repeat.
        with_replacement: bool,
    },
    /// No entry shares the anchor's label.
    PositiveMiss,
    /// No entry has a different label.
    NegativeMiss,
}

/// FIFO ring of unit-norm embeddings with class labels and insertion ticks.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    capacity: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
    ticks: Vec<u64>,
    /// Slot overwritten next; the oldest entry once the ring is full.
    head: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("memory bank", "capacity and width must be positive"));
        }
        Ok(MemoryBank {
            dim,
            capacity,
            values: Vec::with_capacity(capacity * dim),
            labels: Vec::with_capacity(capacity),
            ticks: Vec::with_capacity(capacity),
            head: 0,
        })
    }

    /// A full bank of random unit vectors carrying the given labels.
    pub fn random<R: Rng + ?Sized>(labels: &[usize], dim: usize, rng: &mut R) -> Result<Self> {
        let mut bank = Self::new(labels.len(), dim)?;
        let mut values = Vec::with_capacity(labels.len() * dim);
        for _ in 0..labels.len() {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
            values.extend(row.iter().map(|v| v / norm));
        }
        let ticks: Vec<u64> = (0..labels.len() as u64).collect();
        bank.push(&values, labels, &ticks);
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ticks(&self) -> &[u64] {
        &self.ticks
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn head(&self) -> usize {
        self.head
    }

    /// Rebuilds a bank from raw parts (checkpoint restore).
    pub fn from_parts(
        capacity: usize,
        dim: usize,
        values: Vec<f64>,
        labels: Vec<usize>,
        ticks: Vec<u64>,
        head: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if n > capacity || values.len() != n * dim || ticks.len() != n || head >= capacity.max(1) || dim == 0 {
            return Err(Error::invalid("memory bank", "inconsistent parts"));
        }
        Ok(MemoryBank {
            dim,
            capacity,
            values,
            labels,
            ticks,
            head,
        })
    }

    pub fn entry(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.dim..(slot + 1) * self.dim]
    }

    fn push(&mut self, values: &[f64], labels: &[usize], ticks: &[u64]) {
        for (i, (&y, &t)) in labels.iter().zip(ticks).enumerate() {
            let row = &values[i * self.dim..(i + 1) * self.dim];
            if self.len() < self.capacity {
                self.values.extend_from_slice(row);
                self.labels.push(y);
                self.ticks.push(t);
                self.head = self.len() % self.capacity;
            } else {
                let s = self.head;
                self.values[s * self.dim..(s + 1) * self.dim].copy_from_slice(row);
                self.labels[s] = y;
                self.ticks[s] = t;
                self.head = (s + 1) % self.capacity;
            }
        }
    }

    /// Enqueues a batch, evicting the oldest entries beyond capacity.
    ///
    /// Only values are stored; graph attachments are dropped. Rows are unit
    /// norm, or zero when the raw embedding was zero.
    pub fn update(&mut self, embeddings: &Tensor, labels: &[usize], ticks: &[u64]) -> Result<()> {
        if embeddings.shape().len() != 2 || embeddings.cols() != self.dim {
            return Err(Error::shape("bank update", &[embeddings.shape(), &[self.dim]]));
        }
        if embeddings.rows() != labels.len() || labels.len() != ticks.len() {
            return Err(Error::shape(
                "bank update",
                &[embeddings.shape(), &[labels.len()], &[ticks.len()]],
            ));
        }
        self.push(embeddings.data(), labels, ticks);
        debug_assert!(self.values.chunks(self.dim).all(|r| {
            let n: f64 = r.iter().map(|v| v * v).sum();
            (n - 1.0).abs() < 1e-6 || n < 1e-12
        }));
        Ok(())
    }

    /// One positive uniformly among same-label entries and `k` negatives
    /// uniformly without replacement among different-label entries.
    pub fn retrieve<R: Rng + ?Sized>(&self, label: usize, k: usize, rng: &mut R) -> Result<Retrieval> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        let (same, other): (Vec<usize>, Vec<usize>) = (0..self.len()).partition(|&s| self.labels[s] == label);
        Ok(draw(&same, &other, k, rng))
    }

    /// Stored entries as a detached `[len, dim]` tensor.
    pub fn as_tensor(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::EmptyBank);
        }
        Tensor::from_vec(self.values.clone(), &[self.len(), self.dim])
    }

    pub fn ids(&self) -> SampleIds {
        self.ticks.clone().into()
    }
}

fn draw<R: Rng + ?Sized>(same: &[usize], other: &[usize], k: usize, rng: &mut R) -> Retrieval {
    if same.is_empty() {
        return Retrieval::PositiveMiss;
    }
    if other.is_empty() {
        return Retrieval::NegativeMiss;
    }
    let positive = same[rng.random_range(0..same.len())];
    let with_replacement = other.len() < k;
    let negatives = if with_replacement {
        (0..k).map(|_| other[rng.random_range(0..other.len())]).collect()
    } else {
        index::sample(rng, other.len(), k)
            .into_iter()
            .map(|j| other[j])
            .collect()
    };
    Retrieval::Found {
        positive,
        negatives,
        with_replacement,
    }
}

/// One bank per (network, stage), enqueued in lockstep so that slot `s`
/// holds the same sample in every bank.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortBanks {
    networks: usize,
    stages: usize,
    banks: Vec<MemoryBank>,
    next_tick: u64,
}

impl CohortBanks {
    /// Random unit vectors with uniformly random labels shared by all banks.
    pub fn random<R: Rng + ?Sized>(
        networks: usize,
        stages: usize,
        capacity: usize,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("memory bank", "no classes"));
        }
        let labels: Vec<usize> = (0..capacity).map(|_| rng.random_range(0..classes)).collect();
        let banks = (0..networks * stages)
            .map(|_| MemoryBank::random(&labels, dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CohortBanks {
            networks,
            stages,
            banks,
            next_tick: capacity as u64,
        })
    }

    pub fn from_parts(networks: usize, stages: usize, banks: Vec<MemoryBank>, next_tick: u64) -> Result<Self> {
        if banks.len() != networks * stages || banks.is_empty() {
            return Err(Error::invalid("memory bank", "bank count does not match cohort"));
        }
        Ok(CohortBanks {
            networks,
            stages,
            banks,
            next_tick,
        })
    }

    pub fn bank(&self, network: usize, stage: usize) -> &MemoryBank {
        &self.banks[network * self.stages + stage]
    }

    pub fn banks(&self) -> &[MemoryBank] {
        &self.banks
    }

    pub fn next_tick(&self) -> u64 {
        self.next_tick
    }

    pub fn networks(&self) -> usize {
        self.networks
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Contrastive rows for every anchor, shared by all banks. Anchors with
    /// no positive or no negative are marked for skipping.
    pub fn retrieve_index<R: Rng + ?Sized>(
        &self,
        anchor_labels: &[usize],
        anchor_ids: SampleIds,
        k: usize,
        rng: &mut R,
    ) -> Result<ContrastiveIndex> {
        let reference = &self.banks[0];
        if reference.is_empty() {
            return Err(Error::EmptyBank);
        }
        debug_assert!(self.banks.iter().all(|b| b.labels == reference.labels));
        let classes = reference.labels.iter().chain(anchor_labels).max().map_or(0, |&m| m + 1);
        let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (s, &y) in reference.labels.iter().enumerate() {
            by_label[y].push(s);
        }
        let mut complements: Vec<Option<Vec<usize>>> = vec![None; classes];
        let mut short = 0usize;
        let rows = anchor_labels
            .iter()
            .map(|&y| {
                let other = complements[y]
                    .get_or_insert_with(|| (0..reference.len()).filter(|&s| reference.labels[s] != y).collect());
                match draw(&by_label[y], other, k, rng) {
                    Retrieval::Found {
                        positive,
                        negatives,
                        with_replacement,
                    } => {
                        debug_assert_eq!(reference.labels[positive], y);
                        debug_assert!(negatives.iter().all(|&n| reference.labels[n] != y));
                        short += usize::from(with_replacement);
                        let mut row = Vec::with_capacity(k + 1);
                        row.push(positive);
                        row.extend(negatives);
                        Some(row)
                    }
                    Retrieval::PositiveMiss | Retrieval::NegativeMiss => None,
                }
            })
            .collect::<Vec<_>>();
        if short > 0 {
            log::warn!("memory bank holds fewer than {k} negatives for {short} anchors; sampled with replacement");
        }
        ContrastiveIndex::new(&rows, anchor_ids, reference.ids())
    }

    /// Bank contents of one (network, stage) as contrastive source rows.
    pub fn source(&self, network: usize, stage: usize) -> Result<Embeddings> {
        let bank = self.bank(network, stage);
        Ok(Embeddings {
            values: bank.as_tensor()?,
            ids: bank.ids(),
            tag: SourceTag { network, stage },
        })
    }

    /// Enqueues one step's normalized embeddings, `per_bank[m][l]`, with shared labels.
    pub fn enqueue(&mut self, per_bank: &[Vec<Tensor>], labels: &[usize]) -> Result<()> {
        if per_bank.len() != self.networks || per_bank.iter().any(|v| v.len() != self.stages) {
            return Err(Error::invalid(
                "bank update",
                "expected one tensor per (network, stage)",
            ));
        }
        let ticks: Vec<u64> = (0..labels.len() as u64).map(|i| self.next_tick + i).collect();
        for (m, stages) in per_bank.iter().enumerate() {
            for (l, t) in stages.iter().enumerate() {
                self.banks[m * self.stages + l].update(&t.detach(), labels, &ticks)?;
            }
        }
        self.next_tick += labels.len() as u64;
        Ok(())
    }
}

/// Sample ids for a batch of dataset indices.
pub fn sample_ids(indices: &[usize]) -> SampleIds {
    Rc::from(indices.iter().map(|&i| i as u64).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, dim: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::from_vec(data, &[n, dim]).unwrap()
    }

    #[test]
    fn batch_of_eight_layout() {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let sampler = ClassAwareSampler::new(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sampler.sample(8, &mut rng).unwrap();
        assert_eq!(b.len(), 8);
        let idx = batch_index(&b.labels, sample_ids(&b.indices)).unwrap();
        assert_eq!(idx.negatives(), 6);
        for i in 0..8 {
            let row = idx.row(i);
            assert_eq!(b.labels[row[0]], b.labels[i]);
            assert!(row[1..].iter().all(|&j| b.labels[j] != b.labels[i]));
        }
    }

    #[test]
    fn batch_of_128_has_126_negatives() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 100).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = ClassAwareSampler::new(&labels).sample(128, &mut rng).unwrap();
        let idx = batch_index(&b.labels, sample_ids(&b.indices)).unwrap();
        assert_eq!(idx.negatives(), 126);
    }

    #[test]
    fn singleton_class_makes_batch_infeasible() {
        let labels = [0, 0, 1, 1, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = ClassAwareSampler::new(&labels).sample(6, &mut rng).unwrap_err();
        match err {
            Error::Infeasible { detail } => assert!(detail.contains("class 2"), "{detail}"),
            e => panic!("unexpected {e:?}"),
        }
        assert!(ClassAwareSampler::new(&labels).sample(5, &mut rng).is_err());
    }

    #[test]
    fn fifo_keeps_most_recent() {
        let mut bank = MemoryBank::new(8, 3).unwrap();
        let first = unit_rows(6, 3, 1);
        let second = unit_rows(6, 3, 2);
        bank.update(&first, &[0; 6], &[0, 1, 2, 3, 4, 5]).unwrap();
        bank.update(&second, &[1; 6], &[6, 7, 8, 9, 10, 11]).unwrap();
        assert_eq!(bank.len(), 8);
        let mut ticks = bank.ticks().to_vec();
        ticks.sort_unstable();
        assert_eq!(ticks, vec![4, 5, 6, 7, 8, 9, 10, 11]);
    }

    #[test]
    fn full_batch_replaces_bank() {
        let mut bank = MemoryBank::random(&[0, 1, 0, 1], 3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let fresh = unit_rows(4, 3, 5);
        bank.update(&fresh, &[2, 2, 3, 3], &[10, 11, 12, 13]).unwrap();
        let mut ticks = bank.ticks().to_vec();
        ticks.sort_unstable();
        assert_eq!(ticks, vec![10, 11, 12, 13]);
        let t = bank.as_tensor().unwrap();
        assert!(!t.requires_grad());
    }

    #[test]
    fn stored_values_are_detached_copies() {
        let g = crate::tensor::Graph::new();
        let x = g.leaf(unit_rows(2, 3, 6));
        let mut bank = MemoryBank::new(4, 3).unwrap();
        bank.update(&x, &[0, 1], &[0, 1]).unwrap();
        let src = bank.as_tensor().unwrap();
        let loss = src.sum().add(&x.sum()).unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn single_label_bank_yields_negative_miss() {
        let bank = MemoryBank::random(&[3; 10], 4, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(bank.retrieve(3, 4, &mut rng).unwrap(), Retrieval::NegativeMiss);
        assert_eq!(bank.retrieve(1, 4, &mut rng).unwrap(), Retrieval::PositiveMiss);
    }

    #[test]
    fn retrieval_partitions_labels() {
        let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
        let bank = MemoryBank::random(&labels, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        match bank.retrieve(2, 20, &mut rng).unwrap() {
            Retrieval::Found {
                positive,
                negatives,
                with_replacement,
            } => {
                assert!(!with_replacement);
                assert_eq!(bank.labels()[positive], 2);
                assert_eq!(negatives.len(), 20);
                assert!(negatives.iter().all(|&n| bank.labels()[n] != 2));
                let mut uniq = negatives.clone();
                uniq.sort_unstable();
                uniq.dedup();
                assert_eq!(uniq.len(), 20);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            bank.retrieve(2, 100, &mut rng).unwrap(),
            Retrieval::Found {
                with_replacement: true,
                ..
            }
        ));
        assert_eq!(
            MemoryBank::new(4, 4).unwrap().retrieve(0, 1, &mut rng),
            Err(Error::EmptyBank)
        );
    }

    #[test]
    fn width_mismatch_on_update_fails() {
        let mut bank = MemoryBank::new(4, 3).unwrap();
        assert!(bank.update(&unit_rows(2, 4, 1), &[0, 1], &[0, 1]).is_err());
    }

    #[test]
    fn cohort_banks_share_labels_and_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut banks = CohortBanks::random(2, 3, 32, 4, 5, &mut rng).unwrap();
        let labels = vec![0, 1, 2, 3];
        let per_bank: Vec<Vec<Tensor>> = (0..2)
            .map(|m| (0..3).map(|l| unit_rows(4, 4, 100 + m * 3 + l)).collect())
            .collect();
        banks.enqueue(&per_bank, &labels).unwrap();
        for b in banks.banks() {
            assert_eq!(b.labels(), banks.bank(0, 0).labels());
            assert_eq!(b.ticks(), banks.bank(0, 0).ticks());
        }
        let ids: SampleIds = Rc::from(vec![500u64, 501, 502, 503]);
        let idx = banks.retrieve_index(&labels, ids, 6, &mut rng).unwrap();
        assert_eq!(idx.negatives(), 6);
        assert_eq!(banks.source(1, 2).unwrap().ids[..], idx.source_ids()[..]);
    }
}
