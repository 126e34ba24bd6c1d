//! Reference implementations in plain `f64` arithmetic, without the tensor engine.

fn normalize(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    row.iter().map(|v| v / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

/// Contrastive rows of an in-batch class-aware layout: the single same-label
/// sample first, then every other-label sample in batch order.
pub fn contrast_rows(labels: &[usize]) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| {
            let pos = (0..labels.len())
                .find(|&j| j != i && labels[j] == labels[i])
                .expect("every anchor has a positive");
            std::iter::once(pos)
                .chain((0..labels.len()).filter(|&j| labels[j] != labels[i]))
                .collect()
        })
        .collect()
}

/// Log-probabilities of anchor rows `za` against contrastive rows `zb`.
fn log_dist(za: &[Vec<f64>], zb: &[Vec<f64>], rows: &[Vec<usize>], tau: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| log_softmax(&r.iter().map(|&j| dot(&za[i], &zb[j]) / tau).collect::<Vec<_>>()))
        .collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// The original single-layer mutual contrastive loss over `M` networks:
///
/// `alpha * (sum_m VCL_m + sum_{a != b} ICL_{a->b})
///  + beta * (sum_{a != b} KL(p_b || p_a) + sum_{a != b} KL(q_{b->a} || q_{a->b}))`
///
/// `embeddings[m]` holds network `m`'s raw `B x dim` rows, normalized here.
pub fn original_mcl(embeddings: &[Vec<f64>], dim: usize, labels: &[usize], tau: f64, alpha: f64, beta: f64) -> f64 {
    let z: Vec<Vec<Vec<f64>>> = embeddings
        .iter()
        .map(|e| e.chunks(dim).map(normalize).collect())
        .collect();
    let rows = contrast_rows(labels);
    let m = z.len();
    let p: Vec<Vec<Vec<f64>>> = z.iter().map(|za| log_dist(za, za, &rows, tau)).collect();
    let q = |a: usize, b: usize| log_dist(&z[a], &z[b], &rows, tau);
    let mut hard = 0.0;
    let mut soft = 0.0;
    for pa in &p {
        hard += mean(pa.iter().map(|r| -r[0]));
    }
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let q_ab = q(a, b);
            let q_ba = q(b, a);
            hard += mean(q_ab.iter().map(|r| -r[0]));
            soft += mean(p[b].iter().zip(&p[a]).map(|(t, s)| kl(t, s)));
            soft += mean(q_ba.iter().zip(&q_ab).map(|(t, s)| kl(t, s)));
        }
    }
    alpha * hard + beta * soft
}

/// Mean cross-entropy of `B x C` logits.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    mean(logits.chunks(classes).zip(labels).map(|(z, &y)| -log_softmax(z)[y]))
}

/// `T^2 sum_a sum_{b != a} KL(softmax(teacher_b / T) || softmax(student_a / T))`, batch mean.
pub fn ensemble_distillation(students: &[Vec<f64>], teachers: &[Vec<f64>], classes: usize, t: f64) -> f64 {
    let mut total = 0.0;
    for (a, s) in students.iter().enumerate() {
        for (b, te) in teachers.iter().enumerate() {
            if a == b {
                continue;
            }
            total += mean(s.chunks(classes).zip(te.chunks(classes)).map(|(zs, zt)| {
                let ls = log_softmax(&zs.iter().map(|v| v / t).collect::<Vec<_>>());
                let lt = log_softmax(&zt.iter().map(|v| v / t).collect::<Vec<_>>());
                kl(&lt, &ls)
            }));
        }
    }
    t * t * total
}

/// Element-wise mean of equally sized arrays.
pub fn mean_logits(branches: &[Vec<f64>]) -> Vec<f64> {
    let n = branches.len() as f64;
    (0..branches[0].len())
        .map(|i| branches.iter().map(|b| b[i]).sum::<f64>() / n)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_softmax() {
        let lp = log_softmax(&[1.0, 0.0]);
        assert!((lp[0].exp() - 0.7310585786300049).abs() < 1e-15);
    }

    #[test]
    fn identical_networks_have_equal_vcl_and_icl() {
        let e = vec![0.3, -1.0, 0.5, 0.2, 1.0, 1.0, -0.4, 0.9];
        let labels = [0, 0, 1, 1];
        let loss = original_mcl(&[e.clone(), e], 2, &labels, 0.5, 1.0, 0.0);
        let single = original_mcl(
            &[vec![0.3, -1.0, 0.5, 0.2, 1.0, 1.0, -0.4, 0.9]],
            2,
            &labels,
            0.5,
            1.0,
            0.0,
        );
        // Two identical networks: 2 VCL + 2 ICL, each equal to the single VCL.
        assert!((loss - 4.0 * single).abs() < 1e-12);
    }
}
