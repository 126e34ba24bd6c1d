//! Gated ensembling of branch logits and ensemble-to-peer distillation.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of `[B, C]` logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::shape("cross entropy", &[logits.shape(), &[labels.len()]]));
    }
    let c = logits.cols();
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid("label", format!("{y} outside [0, {c})")));
    }
    let idx = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let picked = logits.log_softmax_rows()?.take(idx, &[labels.len()])?;
    Ok(picked.mean().neg())
}

/// `sum_m sum_l CE(z_m^l, y)` over every branch classifier of the cohort.
pub fn branch_task_loss(branches: &[Vec<Tensor>], labels: &[usize]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for z in branches.iter().flatten() {
        total = total.add(&cross_entropy(z, labels)?)?;
    }
    Ok(total)
}

/// Per-sample convex combination `sum_l w[:, l] * z_l`.
pub fn ensemble_logits(branches: &[Tensor], weights: &Tensor) -> Result<Tensor> {
    let l = branches.len();
    if l == 0 || weights.shape().len() != 2 || weights.cols() != l {
        return Err(Error::invalid(
            "ensemble",
            format!("{l} branches against gate weights of shape {:?}", weights.shape()),
        ));
    }
    let (b, c) = (branches[0].rows(), branches[0].cols());
    if weights.rows() != b || branches.iter().any(|z| z.shape() != [b, c]) {
        return Err(Error::shape("ensemble", &[branches[0].shape(), weights.shape()]));
    }
    let mut out: Option<Tensor> = None;
    for (j, z) in branches.iter().enumerate() {
        let term = weights.slice_cols(j, j + 1)?.broadcast_cols(c)?.mul(z)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one branch"))
}

/// Gate weights of the uniform-gate ablation.
pub fn uniform_weights(batch: usize, branches: usize) -> Tensor {
    Tensor::full(&[batch, branches], 1.0 / branches as f64)
}

/// `sum_m CE(z_ens_m, y)`.
pub fn gate_task_loss(ensembles: &[Tensor], labels: &[usize]) -> Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for z in ensembles {
        total = total.add(&cross_entropy(z, labels)?)?;
    }
    Ok(total)
}

/// Batch-mean `KL(softmax(teacher / T) || softmax(student / T))`; the teacher is detached.
pub fn softened_kl(teacher: &Tensor, student: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid("temperature", format!("{temperature} (must be > 0)")));
    }
    if teacher.shape() != student.shape() {
        return Err(Error::shape("softened kl", &[teacher.shape(), student.shape()]));
    }
    let inv = 1.0 / temperature;
    let log_t = teacher.detach().scale(inv).log_softmax_rows()?;
    let log_s = student.scale(inv).log_softmax_rows()?;
    let per_entry = log_t.exp().mul(&log_t.sub(&log_s)?)?;
    Ok(per_entry.sum().scale(1.0 / student.rows().max(1) as f64))
}

/// `T^2 sum_a sum_{b != a} KL(softmax(z_ens_b / T) || softmax(z_a / T))`.
pub fn ensemble_kl_loss(finals: &[Tensor], ensembles: &[Tensor], temperature: f64) -> Result<Tensor> {
    if finals.len() != ensembles.len() {
        return Err(Error::invalid(
            "ensemble distillation",
            format!("{} students but {} teachers", finals.len(), ensembles.len()),
        ));
    }
    let mut total = Tensor::scalar(0.0);
    for (a, student) in finals.iter().enumerate() {
        for (b, teacher) in ensembles.iter().enumerate() {
            if a != b {
                total = total.add(&softened_kl(teacher, student, temperature)?)?;
            }
        }
    }
    Ok(total.scale(temperature * temperature))
}

#[derive(Clone, Debug)]
pub struct LogitLoss {
    pub task_g: Tensor,
    pub ens: Tensor,
    pub total: Tensor,
    pub ensembles: Vec<Tensor>,
}

/// Gate supervision plus ensemble distillation for the whole cohort.
///
/// `branches[m]` are network `m`'s stage logits, `gate_weights[m]` its
/// `[B, L]` gate output (or `None` for uniform weights). With uniform weights
/// the gate term is dropped since no gate parameters exist to train.
pub fn logit_loss(
    branches: &[Vec<Tensor>],
    gate_weights: Option<&[Tensor]>,
    labels: &[usize],
    temperature: f64,
) -> Result<LogitLoss> {
    let ensembles = branches
        .iter()
        .enumerate()
        .map(|(m, z)| match gate_weights {
            Some(w) => ensemble_logits(z, &w[m]),
            None => ensemble_logits(z, &uniform_weights(labels.len(), z.len())),
        })
        .collect::<Result<Vec<_>>>()?;
    let task_g = match gate_weights {
        Some(_) => gate_task_loss(&ensembles, labels)?,
        None => Tensor::scalar(0.0),
    };
    let finals: Vec<Tensor> = branches
        .iter()
        .map(|z| {
            z.last()
                .cloned()
                .ok_or_else(|| Error::invalid("ensemble", "network without stages"))
        })
        .collect::<Result<_>>()?;
    let ens = ensemble_kl_loss(&finals, &ensembles, temperature)?;
    let total = task_g.add(&ens)?;
    Ok(LogitLoss {
        task_g,
        ens,
        total,
        ensembles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, Graph};
    use alloc::vec;

    fn z(seed: f64) -> Tensor {
        let data = (0..12).map(|i| libm::sin(i as f64 * 0.9 + seed)).collect();
        Tensor::from_vec(data, &[3, 4]).unwrap()
    }

    #[test]
    fn one_hot_and_uniform_weights() {
        let (a, b) = (z(0.0), z(1.0));
        let onehot = Tensor::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], &[3, 2]).unwrap();
        assert_eq!(
            ensemble_logits(&[a.clone(), b.clone()], &onehot).unwrap().data(),
            a.data()
        );
        let mean = ensemble_logits(&[a.clone(), b.clone()], &uniform_weights(3, 2)).unwrap();
        for ((m, x), y) in mean.data().iter().zip(a.data()).zip(b.data()) {
            assert!((m - 0.5 * (x + y)).abs() < 1e-15);
        }
        let w = Tensor::from_vec(vec![0.2, 0.8, 0.6, 0.4, 0.9, 0.1], &[3, 2]).unwrap();
        let same = ensemble_logits(&[a.clone(), a.clone()], &w).unwrap();
        for (s, x) in same.data().iter().zip(a.data()) {
            assert!((s - x).abs() < 1e-15);
        }
        assert!(ensemble_logits(core::slice::from_ref(&a), &w).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_c() {
        let loss = gate_task_loss(&[Tensor::zeros(&[5, 7])], &[0, 1, 2, 3, 6]).unwrap();
        assert!((loss.item() - libm::log(7.0)).abs() < 1e-12);
        let confident = Tensor::from_vec(vec![50.0, 0.0, 0.0, 50.0], &[2, 2]).unwrap();
        assert!(gate_task_loss(&[confident], &[0, 1]).unwrap().item() < 1e-20);
    }

    #[test]
    fn identical_teacher_gives_zero_and_no_teacher_gradient() {
        let g = Graph::new();
        let student = g.leaf(z(0.3));
        let teacher = g.leaf(z(0.3));
        let loss = ensemble_kl_loss(&[student.clone(), z(9.0)], &[z(9.0), teacher.clone()], 3.0).unwrap();
        assert!(loss.item().abs() < 1e-12);
        let other = g.leaf(z(1.1));
        let loss = ensemble_kl_loss(&[student.clone(), z(9.0)], &[z(9.0), other.clone()], 3.0).unwrap();
        assert!(loss.item() > 0.0);
        let grads = g.grad(&loss, None, &[&student, &other], false).unwrap();
        assert!(grads[0].data().iter().any(|&v| v != 0.0));
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_vanishes_at_huge_temperature() {
        let kl = softened_kl(&z(1.0), &z(0.0), 1e6).unwrap();
        assert!(kl.item().abs() < 1e-6);
        let scaled = ensemble_kl_loss(&[z(0.0), z(2.0)], &[z(1.0), z(3.0)], 1e6).unwrap();
        assert!(scaled.item().is_finite());
    }

    #[test]
    fn logit_loss_is_component_sum() {
        let g = Graph::new();
        let w = vec![g.leaf(uniform_weights(3, 2)), g.leaf(uniform_weights(3, 2))];
        let branches = vec![vec![z(0.0), z(1.0)], vec![z(2.0), z(3.0)]];
        let out = logit_loss(&branches, Some(&w), &[0, 1, 3], 3.0).unwrap();
        assert!((out.total.item() - out.task_g.item() - out.ens.item()).abs() < 1e-12);
        let uni = logit_loss(&branches, None, &[0, 1, 3], 3.0).unwrap();
        assert_eq!(uni.task_g.item(), 0.0);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let g = Graph::new();
        let x = g.leaf(z(0.5));
        let labels = [1, 3, 0];
        let loss = cross_entropy(&x, &labels).unwrap();
        let analytic = g.grad(&loss, None, &[&x], false).unwrap().remove(0);
        let fd = finite_diff_grad(|t| Ok(cross_entropy(t, &labels)?.item()), &z(0.5), 1e-6).unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            assert!((a - f).abs() < 1e-7);
        }
        assert!(cross_entropy(&x, &[0, 4, 1]).is_err());
    }

    #[test]
    fn distillation_matches_finite_differences() {
        let g = Graph::new();
        let s = g.leaf(z(0.2));
        let t = z(1.7);
        let loss = ensemble_kl_loss(&[s.clone(), t.clone()], &[t.clone(), z(0.8)], 3.0).unwrap();
        let analytic = g.grad(&loss, None, &[&s], false).unwrap().remove(0);
        let fd = finite_diff_grad(
            |x| Ok(ensemble_kl_loss(&[x.clone(), t.clone()], &[t.clone(), z(0.8)], 3.0)?.item()),
            &z(0.2),
            1e-6,
        )
        .unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            assert!((a - f).abs() < 1e-7);
        }
    }
}
