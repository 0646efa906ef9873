use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy between softmax(logits) and soft target rows.
pub fn cross_entropy_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    let (_, c) = targets.matrix_dims()?;
    if c < 2 {
        return Err(Error::contract(format!("cross entropy needs at least 2 classes, got {c}")));
    }
    for i in 0..targets.rows() {
        let row = targets.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&t| t < 0.0) {
            return Err(Error::contract(format!("target row {i} is not a distribution (sums to {sum})")));
        }
    }
    g.softmax_cross_entropy(logits, targets)
}

/// Mean per-entry binary cross-entropy of sigmoid(logits) against targets in `[0, 1]`.
pub fn binary_ce_loss(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    if let Some(bad) = targets.data().iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::contract(format!("binary target {bad} outside [0, 1]")));
    }
    g.sigmoid_bce(logits, targets)
}

/// Row-wise softmax, max-subtracted.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = logits.numel() / logits.rows();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_rows(labels: &[usize], c: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![labels.len(), c]);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[i * c + l] = 1.0;
        }
        t
    }

    #[test]
    fn uniform_logits_cost_log_c() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![4, 10]));
        let l = cross_entropy_loss(&mut g, z, &one_hot_rows(&[0, 3, 9, 2], 10)).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_prediction_costs_nothing() {
        let mut z = Tensor::zeros(vec![2, 3]);
        z.data_mut()[1] = 50.0;
        z.data_mut()[3 + 2] = 50.0;
        let mut g = Graph::new();
        let zv = g.constant(z);
        let l = cross_entropy_loss(&mut g, zv, &one_hot_rows(&[1, 2], 3)).unwrap();
        assert!(g.value(l).item() < 1e-6);
    }

    #[test]
    fn unnormalized_targets_are_rejected() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![1, 3]));
        let t = Tensor::from_rows(&[[0.5, 0.6, 0.0]]).unwrap();
        assert!(matches!(cross_entropy_loss(&mut g, z, &t), Err(Error::Contract(_))));
        let one = Tensor::from_rows(&[[1.0]]).unwrap();
        let z1 = g.constant(Tensor::zeros(vec![1, 1]));
        assert!(cross_entropy_loss(&mut g, z1, &one).is_err());
    }

    #[test]
    fn binary_loss_reference_points() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![1, 1]));
        let l = binary_ce_loss(&mut g, z, &Tensor::full(vec![1, 1], 0.5)).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::full(vec![1, 1], 50.0));
        let l = binary_ce_loss(&mut g, z, &Tensor::ones(vec![1, 1])).unwrap();
        assert!(g.value(l).item() < 1e-20);

        assert!(matches!(binary_ce_loss(&mut g, z, &Tensor::full(vec![1, 1], 1.5)), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Tensor::from_rows(&[[1.0, 2.0, 3.0], [-700.0, 0.0, 700.0]]).unwrap();
        let p = softmax(&z);
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
