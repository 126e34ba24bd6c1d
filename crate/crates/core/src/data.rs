//! Labeled vector datasets and synthetic generators.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `N x D` features with labels in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::shape("dataset", &[&[features.len()], &[labels.len(), dim]]));
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset", "no samples"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid("dataset", format!("label {y} outside [0, {classes})")));
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "dataset features".into(),
                value: *v,
            });
        }
        Ok(LabeledDataset {
            features,
            dim,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Features and labels of the given rows.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let x = Tensor::from_vec(data, &[indices.len(), self.dim])?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn all(&self) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            Tensor::from_vec(self.features.clone(), &[self.len(), self.dim])?,
            self.labels.clone(),
        ))
    }

    fn select(&self, keep: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(keep.len() * self.dim);
        for &i in keep {
            features.extend_from_slice(self.row(i));
        }
        LabeledDataset::new(
            features,
            self.dim,
            keep.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.split,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

fn default_test_per_class() -> usize {
    250
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("blobs.classes", "need at least 2 classes"));
        }
        if self.per_class == 0 || self.test_per_class == 0 || self.dim == 0 {
            return Err(Error::invalid("blobs", "sample counts and dimension must be positive"));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(Error::invalid(
                "blobs.spread",
                format!("{} (must be >= 0)", self.spread),
            ));
        }
        Ok(())
    }
}

/// Train and test sets drawn from the same class-conditional distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTest {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Isotropic Gaussian clusters around means drawn uniformly on the unit sphere.
///
/// Class means, train samples and test samples use separate streams of the
/// seed, so changing one sample count leaves the other split unchanged.
pub fn gaussian_blobs(spec: &BlobSpec, seed: u64) -> Result<TrainTest> {
    spec.validate()?;
    let mut mean_rng = ChaCha8Rng::seed_from_u64(seed);
    mean_rng.set_stream(0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
            let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let draw = |stream: u64, per_class: usize, split: Split| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut features = Vec::with_capacity(spec.classes * per_class * spec.dim);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        for _ in 0..per_class {
            for (c, mean) in means.iter().enumerate() {
                for &m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(m + spec.spread * z);
                }
                labels.push(c);
            }
        }
        LabeledDataset::new(features, spec.dim, labels, spec.classes, split)
    };
    Ok(TrainTest {
        train: draw(1, spec.per_class, Split::Train)?,
        test: draw(2, spec.test_per_class, Split::Test)?,
    })
}

/// Standard-normal features with labels uniform over `classes`, independent of the features.
pub fn random_labels(samples: usize, dim: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::invalid("random labels", "need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..samples * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (0..samples).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(features, dim, labels, classes, Split::Test)
}

/// Per-class proportional subsample of a training set.
///
/// Each class keeps `floor(n_c * fraction)` samples; the shortfall against
/// `floor(N * fraction)` goes one sample each to the lowest class indices.
/// Original order is preserved. Test sets are returned unchanged.
pub fn stratified_subset(dataset: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("fraction", format!("{fraction} outside (0, 1]")));
    }
    if dataset.split == Split::Test || fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let counts = dataset.class_counts();
    let mut quota: Vec<usize> = counts
        .iter()
        .map(|&n| libm::floor(n as f64 * fraction) as usize)
        .collect();
    let total = libm::floor(dataset.len() as f64 * fraction) as usize;
    let mut remainder = total.saturating_sub(quota.iter().sum());
    for (c, q) in quota.iter_mut().enumerate() {
        if remainder == 0 {
            break;
        }
        if *q < counts[c] {
            *q += 1;
            remainder -= 1;
        }
    }
    if let Some(c) = (0..dataset.classes).find(|&c| counts[c] > 0 && quota[c] == 0) {
        return Err(Error::invalid(
            "fraction",
            format!("{fraction} leaves class {c} ({} samples) empty", counts[c]),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(total);
    for (c, members) in by_class.iter().enumerate() {
        keep.extend(
            index::sample(&mut rng, members.len(), quota[c])
                .into_iter()
                .map(|j| members[j]),
        );
    }
    keep.sort_unstable();
    dataset.select(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BlobSpec {
        BlobSpec {
            classes: 4,
            per_class: 10,
            test_per_class: 5,
            dim: 3,
            spread: 0.1,
        }
    }

    #[test]
    fn blobs_are_seed_deterministic() {
        assert_eq!(gaussian_blobs(&spec(), 4).unwrap(), gaussian_blobs(&spec(), 4).unwrap());
        assert_ne!(gaussian_blobs(&spec(), 4).unwrap(), gaussian_blobs(&spec(), 5).unwrap());
        let d = gaussian_blobs(&spec(), 4).unwrap();
        assert_eq!(d.train.class_counts(), vec![10; 4]);
        assert_eq!(d.test.class_counts(), vec![5; 4]);
    }

    #[test]
    fn test_split_independent_of_train_size() {
        let a = gaussian_blobs(&spec(), 9).unwrap();
        let b = gaussian_blobs(
            &BlobSpec {
                per_class: 20,
                ..spec()
            },
            9,
        )
        .unwrap();
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn single_class_blobs_rejected() {
        assert!(gaussian_blobs(&BlobSpec { classes: 1, ..spec() }, 0).is_err());
    }

    #[test]
    fn half_subset_halves_every_class() {
        let d = gaussian_blobs(&spec(), 1).unwrap().train;
        let s = stratified_subset(&d, 0.5, 3).unwrap();
        assert_eq!(s.class_counts(), vec![5; 4]);
        assert_eq!(stratified_subset(&d, 1.0, 3).unwrap(), d);
    }

    #[test]
    fn remainder_goes_to_lowest_classes() {
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let d = LabeledDataset::new(vec![0.0; 9], 1, labels, 3, Split::Train).unwrap();
        // floor(9 * 0.5) = 4, per-class floors give 1 + 1 + 1.
        let s = stratified_subset(&d, 0.5, 0).unwrap();
        assert_eq!(s.class_counts(), vec![2, 1, 1]);
        assert!(stratified_subset(&d, 0.2, 0).is_err());
        assert!(stratified_subset(&d, 0.0, 0).is_err());
    }

    #[test]
    fn test_split_untouched() {
        let d = gaussian_blobs(&spec(), 1).unwrap().test;
        assert_eq!(stratified_subset(&d, 0.5, 0).unwrap(), d);
    }

    #[test]
    fn invalid_datasets_rejected() {
        assert!(LabeledDataset::new(vec![0.0; 3], 2, vec![0], 1, Split::Train).is_err());
        assert!(LabeledDataset::new(vec![0.0; 2], 2, vec![3], 2, Split::Train).is_err());
        assert!(LabeledDataset::new(vec![f64::NAN, 0.0], 2, vec![0], 1, Split::Train).is_err());
    }
}
