//! Adaptation objectives: self-entropy, batched entropy, marginal entropy
//! over augmented views with confidence selection, kNN soft pseudo-labels,
//! and temperature-sharpened pseudo-label cross-entropy.
//!
//! Every objective exists twice: a plain value-level function with obvious
//! brute-force semantics (the test oracle), and a graph-level builder used
//! by the adaptation engine to get gradients.

use crate::error::{Result, VpaError};
use crate::tensor::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Logs inside entropies are floored here to keep 0 log 0 finite.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(VpaError::Param(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

pub fn softmax_value(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Shannon entropy of the temperature softmax of one logit row.
pub fn self_entropy(z: &[f64], tau: f64) -> Result<f64> {
    let p = softmax_value(z, tau)?;
    Ok(-p.iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>())
}

/// Per-row entropies of a [k, c] logit matrix.
pub fn entropy_rows_value(z: &Tensor, tau: f64) -> Result<Vec<f64>> {
    if z.ndim() != 2 || z.rows() == 0 {
        return Err(VpaError::Contract(format!("expected nonempty 2-d logits, got {:?}", z.shape)));
    }
    let c = z.cols();
    (0..z.rows()).map(|r| self_entropy(&z.data[r * c..(r + 1) * c], tau)).collect()
}

/// Mean per-row entropy (batched-image objective).
pub fn bia_loss_value(z: &Tensor, tau: f64) -> Result<f64> {
    let h = entropy_rows_value(z, tau)?;
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

/// Indices of rows kept by confidence selection, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub indices: Vec<usize>,
}

/// Keep the max(1, round(eta * K)) lowest-entropy rows; ties broken by
/// lower index.
pub fn confidence_select(z: &Tensor, tau: f64, eta: f64) -> Result<SelectionMask> {
    if !(0.0..=1.0).contains(&eta) || eta == 0.0 {
        return Err(VpaError::Param(format!("eta must be in (0, 1], got {eta}")));
    }
    let h = entropy_rows_value(z, tau)?;
    let keep = ((eta * h.len() as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..h.len()).collect();
    order.sort_by(|&a, &b| h[a].partial_cmp(&h[b]).unwrap().then(a.cmp(&b)));
    let mut indices = order[..keep].to_vec();
    indices.sort_unstable();
    Ok(SelectionMask { indices })
}

/// Marginal entropy of the averaged logits of the selected views
/// (single-image objective). Rows must all be views of one image.
pub fn sia_loss_value(z: &Tensor, tau: f64, eta: f64) -> Result<f64> {
    let mask = confidence_select(z, tau, eta)?;
    let c = z.cols();
    let mut mean = vec![0.0; c];
    for &i in &mask.indices {
        for j in 0..c {
            mean[j] += z.at2(i, j);
        }
    }
    for v in &mut mean {
        *v /= mask.indices.len() as f64;
    }
    self_entropy(&mean, tau)
}

/// One memory-queue record: a weak-view CLS feature with its logits.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub cls: Tensor,
    pub z_weak: Tensor,
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(VpaError::Shape(format!("cosine: {:?} vs {:?}", a.shape, b.shape)));
    }
    let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
    let na: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb).max(1e-12))
}

/// Soft pseudo-label: mean of the stored logits of the k entries whose CLS
/// features are most cosine-similar to the query.
pub fn knn_pseudo_label(query_cls: &Tensor, entries: &[QueueEntry], k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(VpaError::Param("k must be positive".into()));
    }
    if entries.len() < k {
        return Err(VpaError::Contract(format!(
            "queue holds {} entries, need k = {k}",
            entries.len()
        )));
    }
    let sims: Result<Vec<f64>> =
        entries.iter().map(|e| cosine_similarity(query_cls, &e.cls)).collect();
    let sims = sims?;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    let c = entries[0].z_weak.numel();
    let mut z_hat = Tensor::zeros(&[c]);
    for &i in &order[..k] {
        for j in 0..c {
            z_hat.data[j] += entries[i].z_weak.data[j];
        }
    }
    for v in &mut z_hat.data {
        *v /= k as f64;
    }
    Ok(z_hat)
}

/// Cross-entropy of the plain student softmax against the tau-sharpened
/// teacher softmax of the pseudo-label logits.
pub fn pla_loss_value(z_strong: &[f64], z_hat: &[f64], tau: f64) -> Result<f64> {
    if z_strong.len() != z_hat.len() {
        return Err(VpaError::Shape(format!(
            "student/teacher length mismatch: {} vs {}",
            z_strong.len(),
            z_hat.len()
        )));
    }
    let teacher = softmax_value(z_hat, tau)?;
    let student = softmax_value(z_strong, 1.0)?;
    Ok(-teacher
        .iter()
        .zip(&student)
        .map(|(t, s)| t * s.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

// graph-level builders

/// Per-row entropies as a [rows, 1] var.
pub fn entropy_rows_var(z: &Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let p = z.softmax_temp(tau)?;
    Ok(p.mul(&p.ln_floored())?.sum_last_keep().mul_scalar(-1.0))
}

/// Scalar mean entropy over the batch.
pub fn bia_loss_var(z: &Var, tau: f64) -> Result<Var> {
    if z.shape().first().copied().unwrap_or(0) == 0 {
        return Err(VpaError::Contract("bia_loss on empty batch".into()));
    }
    Ok(entropy_rows_var(z, tau)?.mean_all())
}

/// Marginal entropy of the mean of the selected logit rows. The selection
/// itself is not differentiated through; recompute the mask each step from
/// current values.
pub fn sia_loss_var(z: &Var, tau: f64, mask: &SelectionMask) -> Result<Var> {
    if mask.indices.is_empty() {
        return Err(VpaError::Contract("empty selection".into()));
    }
    let sel = z.select_rows(&mask.indices)?;
    let n = mask.indices.len();
    let ones = sel.graph().constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let mean = ones.matmul(&sel)?;
    Ok(entropy_rows_var(&mean, tau)?.sum_all())
}

/// Mean pseudo-label cross-entropy over a batch. `teacher` is [b, c] of
/// already-sharpened probabilities, treated as a constant.
pub fn pla_loss_var(g: &Graph, z_strong: &Var, teacher: &Tensor) -> Result<Var> {
    let shape = z_strong.shape();
    if shape != teacher.shape {
        return Err(VpaError::Shape(format!(
            "student {shape:?} vs teacher {:?}",
            teacher.shape
        )));
    }
    let b = shape[0];
    if b == 0 {
        return Err(VpaError::Contract("pla_loss on empty batch".into()));
    }
    let logp = z_strong.softmax_temp(1.0)?.ln_floored();
    Ok(logp.mul(&g.constant(teacher.clone()))?.sum_all().mul_scalar(-1.0 / b as f64))
}

/// Sharpened teacher distribution rows for a [b, c] pseudo-label matrix.
pub fn sharpen_teacher(z_hat: &Tensor, tau: f64) -> Result<Tensor> {
    if z_hat.ndim() != 2 {
        return Err(VpaError::Shape(format!("expected 2-d pseudo-labels, got {:?}", z_hat.shape)));
    }
    let c = z_hat.cols();
    let mut out = Tensor::zeros(&z_hat.shape);
    for r in 0..z_hat.rows() {
        let p = softmax_value(&z_hat.data[r * c..(r + 1) * c], tau)?;
        out.data[r * c..(r + 1) * c].copy_from_slice(&p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_logits(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn entropy_pinned_values() {
        let h = self_entropy(&[0.0; 10], 1.0).unwrap();
        assert!((h - 10.0f64.ln()).abs() < 1e-12);
        let h = self_entropy(&[2.0, 0.0], 1.0).unwrap();
        assert!((h - 0.365334).abs() < 1e-4, "{h}");
        let h = self_entropy(&[1000.0, 0.0, 0.0], 1.0).unwrap();
        assert!(h < 1e-6);
        assert!(self_entropy(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn bia_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_logits(4, 3, &mut rng);
        let mean = bia_loss_value(&z, 0.8).unwrap();
        let rows = entropy_rows_value(&z, 0.8).unwrap();
        assert!((mean - rows.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn selection_keeps_lowest_entropy_with_index_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_logits(10, 4, &mut rng);
        let all = confidence_select(&z, 1.0, 1.0).unwrap();
        assert_eq!(all.indices, (0..10).collect::<Vec<_>>());
        let m = confidence_select(&z, 1.0, 0.3).unwrap();
        assert_eq!(m.indices.len(), 3);
        let h = entropy_rows_value(&z, 1.0).unwrap();
        let worst_kept = m.indices.iter().map(|&i| h[i]).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..10 {
            if !m.indices.contains(&i) {
                assert!(h[i] >= worst_kept);
            }
        }
        // identical rows: ties resolve to the earliest indices
        let z = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(confidence_select(&z, 1.0, 0.5).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn selection_invariant_under_common_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_logits(8, 5, &mut rng);
        let scaled = z.map(|v| v * 3.7);
        let a = confidence_select(&z, 1.0, 0.25).unwrap();
        let b = confidence_select(&scaled, 1.0, 0.25).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sia_degeneracies() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = rand_logits(1, 6, &mut rng);
        let sia = sia_loss_value(&z, 1.0, 1.0).unwrap();
        let bia = bia_loss_value(&z, 1.0).unwrap();
        let se = self_entropy(&z.data, 1.0).unwrap();
        assert!((sia - bia).abs() < 1e-12 && (bia - se).abs() < 1e-12);

        let z = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, -1.0, 2.0, -0.5, -3.0]).unwrap();
        let h = sia_loss_value(&z, 1.0, 1.0).unwrap();
        assert!((h - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sia_matches_step_by_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z = rand_logits(12, 5, &mut rng);
            let (tau, eta) = (rng.gen_range(0.2..2.0), rng.gen_range(0.1..1.0));
            let got = sia_loss_value(&z, tau, eta).unwrap();
            let mask = confidence_select(&z, tau, eta).unwrap();
            let mut mean = vec![0.0; 5];
            for &i in &mask.indices {
                for j in 0..5 {
                    mean[j] += z.at2(i, j) / mask.indices.len() as f64;
                }
            }
            let want = self_entropy(&mean, tau).unwrap();
            assert!((got - want).abs() < 1e-12);
        }
    }

    fn rand_entry(d: usize, c: usize, rng: &mut ChaCha8Rng) -> QueueEntry {
        QueueEntry {
            cls: Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            z_weak: Tensor::new(vec![c], (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap(),
        }
    }

    #[test]
    fn knn_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = rand_entry(4, 3, &mut rng);
        let entries = vec![e.clone(), e.clone(), e.clone()];
        let z = knn_pseudo_label(&e.cls, &entries, 3).unwrap();
        for (a, b) in z.data.iter().zip(&e.z_weak.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let far = rand_entry(4, 3, &mut rng);
        let entries = vec![e.clone(), far.clone()];
        let z = knn_pseudo_label(&far.cls, &entries, 1).unwrap();
        assert_eq!(z.data, far.z_weak.data);
        assert!(knn_pseudo_label(&e.cls, &entries, 5).is_err());
    }

    #[test]
    fn knn_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let entries: Vec<QueueEntry> = (0..64).map(|_| rand_entry(8, 5, &mut rng)).collect();
        let q = rand_entry(8, 5, &mut rng).cls;
        let got = knn_pseudo_label(&q, &entries, 11).unwrap();
        let mut sims: Vec<(usize, f64)> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, cosine_similarity(&q, &e.cls).unwrap()))
            .collect();
        sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut want = vec![0.0; 5];
        for &(i, _) in &sims[..11] {
            for j in 0..5 {
                want[j] += entries[i].z_weak.data[j] / 11.0;
            }
        }
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pla_gibbs_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let c = rng.gen_range(2..8);
            let zs: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let zh: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let tau = rng.gen_range(0.05..2.0);
            let loss = pla_loss_value(&zs, &zh, tau).unwrap();
            let teacher = softmax_value(&zh, tau).unwrap();
            let h_teacher =
                -teacher.iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum::<f64>();
            assert!(loss >= 0.0);
            assert!(loss >= h_teacher - 1e-9, "{loss} < {h_teacher}");
        }
    }

    #[test]
    fn pla_agreement_is_near_minimum() {
        let zh = [6.0, 0.0, 0.0];
        let tau = 0.2;
        let agree: Vec<f64> = zh.iter().map(|v| v / tau).collect();
        let low = pla_loss_value(&agree, &zh, tau).unwrap();
        let high = pla_loss_value(&[0.0, 6.0, 0.0], &zh, tau).unwrap();
        assert!(low < 0.01 && high > 1.0, "{low} {high}");
    }

    #[test]
    fn graph_builders_match_value_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = rand_logits(6, 4, &mut rng);
        let tau = 0.7;

        let g = Graph::new();
        let zv = g.leaf(z.clone());
        let bia = bia_loss_var(&zv, tau).unwrap().value().item();
        assert!((bia - bia_loss_value(&z, tau).unwrap()).abs() < 1e-12);

        let mask = confidence_select(&z, tau, 0.5).unwrap();
        let sia = sia_loss_var(&zv, tau, &mask).unwrap().value().item();
        assert!((sia - sia_loss_value(&z, tau, 0.5).unwrap()).abs() < 1e-12);

        let z_hat = rand_logits(6, 4, &mut rng);
        let teacher = sharpen_teacher(&z_hat, 0.3).unwrap();
        let pla = pla_loss_var(&g, &zv, &teacher).unwrap().value().item();
        let mut want = 0.0;
        for r in 0..6 {
            want += pla_loss_value(
                &z.data[r * 4..(r + 1) * 4],
                &z_hat.data[r * 4..(r + 1) * 4],
                0.3,
            )
            .unwrap()
                / 6.0;
        }
        assert!((pla - want).abs() < 1e-12, "{pla} vs {want}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::tensor::fd::{finite_diff_gradient, relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..3 {
            let z = rand_logits(5, 4, &mut rng);
            let tau = 0.9;
            let z_hat = rand_logits(5, 4, &mut rng);
            let teacher = sharpen_teacher(&z_hat, 0.4).unwrap();
            let mask = confidence_select(&z, tau, 0.6).unwrap();
            for which in 0..3 {
                let eval = |t: &Tensor| -> f64 {
                    let g = Graph::new();
                    let v = g.leaf(t.clone());
                    match which {
                        0 => bia_loss_var(&v, tau).unwrap().value().item(),
                        1 => sia_loss_var(&v, tau, &mask).unwrap().value().item(),
                        _ => pla_loss_var(&g, &v, &teacher).unwrap().value().item(),
                    }
                };
                let g = Graph::new();
                let v = g.leaf(z.clone());
                let loss = match which {
                    0 => bia_loss_var(&v, tau).unwrap(),
                    1 => sia_loss_var(&v, tau, &mask).unwrap(),
                    _ => pla_loss_var(&g, &v, &teacher).unwrap(),
                };
                let analytic = g.backward(&loss).unwrap().wrt(&v).unwrap().clone();
                let oracle = finite_diff_gradient(&eval, &z, 1e-6).unwrap();
                let err = relative_error(&analytic, &oracle);
                assert!(err < 1e-7, "trial {trial} objective {which}: rel err {err}");
            }
        }
    }
}
