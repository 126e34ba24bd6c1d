//! Linear probe on frozen features.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit::cross_entropy;
use crate::tensor::{Graph, Tensor};
use crate::train::accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            lr: 0.5,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

/// Softmax regression from zero weights by full-batch gradient descent.
///
/// Inputs are detached, so the feature extractor is never updated. The result
/// depends only on the inputs and the configuration.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.shape().len() != 2 || test_x.shape().len() != 2 || train_x.cols() != test_x.cols() {
        return Err(Error::shape("probe", &[train_x.shape(), test_x.shape()]));
    }
    if !(cfg.lr > 0.0) || cfg.steps == 0 {
        return Err(Error::invalid(
            "probe",
            format!("lr {} and steps {} must be positive", cfg.lr, cfg.steps),
        ));
    }
    let d = train_x.cols();
    let (train_x, test_x) = (train_x.detach(), test_x.detach());
    let mut w = Tensor::zeros(&[d, classes]);
    let mut b = Tensor::zeros(&[classes]);
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let (wl, bl) = (g.leaf(w.clone()), g.leaf(b.clone()));
        let loss = cross_entropy(&train_x.matmul(&wl)?.add_row(&bl)?, train_y)?;
        final_loss = loss.item();
        let grads = g.grad(&loss, None, &[&wl, &bl], false)?;
        let step = |p: &Tensor, gr: &Tensor, decay: f64| -> Result<Tensor> {
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(gr.data())
                .map(|(v, d)| v - cfg.lr * (d + decay * v))
                .collect();
            Tensor::from_vec(data, p.shape())
        };
        w = step(&w, &grads[0], cfg.weight_decay)?;
        b = step(&b, &grads[1], 0.0)?;
    }
    if !final_loss.is_finite() {
        return Err(Error::NonFinite {
            component: "probe loss".into(),
            value: final_loss,
        });
    }
    let predict = |x: &Tensor| -> Result<Tensor> { x.matmul(&w)?.add_row(&b) };
    Ok(ProbeResult {
        train_accuracy: accuracy(&predict(&train_x)?, train_y),
        test_accuracy: accuracy(&predict(&test_x)?, test_y),
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gaussian_blobs, BlobSpec};

    #[test]
    fn separable_blobs_are_probed_accurately_and_deterministically() {
        let spec = BlobSpec {
            classes: 3,
            per_class: 30,
            test_per_class: 20,
            dim: 5,
            spread: 0.05,
        };
        let d = gaussian_blobs(&spec, 2).unwrap();
        let (tx, ty) = d.train.all().unwrap();
        let (vx, vy) = d.test.all().unwrap();
        let cfg = ProbeConfig::default();
        let a = linear_probe(&tx, &ty, &vx, &vy, 3, &cfg).unwrap();
        let b = linear_probe(&tx, &ty, &vx, &vy, 3, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.test_accuracy > 0.95, "{a:?}");
    }

    #[test]
    fn mismatched_widths_rejected() {
        let x = Tensor::zeros(&[2, 3]);
        let y = Tensor::zeros(&[2, 4]);
        assert!(linear_probe(&x, &[0, 1], &y, &[0, 1], 2, &ProbeConfig::default()).is_err());
    }
}
