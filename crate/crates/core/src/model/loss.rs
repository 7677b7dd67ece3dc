use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// dLoss/dp, `[N, 1]`, ready to feed into `Network::backward`.
    pub grad: Tensor,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Weighted binary cross-entropy averaged over the batch:
/// `(1/N) * sum_i w_i * (-l_i log p_i - (1 - l_i) log(1 - p_i))`.
///
/// `weights = None` means all ones.
pub fn bce_loss(probs: &Tensor, labels: &Tensor, weights: Option<&[f64]>) -> Result<LossValue> {
    let n = probs.shape()[0];
    if probs.shape() != [n, 1] || labels.shape() != probs.shape() {
        return Err(Error::Shape(format!(
            "bce expects matching [N, 1] tensors, got {:?} and {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Shape(format!("{} weights for a batch of {n}", w.len())));
        }
        if let Some(i) = w.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Validation(format!("weight {} at index {i} is negative or non-finite", w[i])));
        }
    }
    if let Some(i) = labels.data().iter().position(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Validation(format!(
            "label {} at index {i} is not 0 or 1",
            labels.data()[i]
        )));
    }
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let p = clamp_prob(probs.data()[i]);
        let l = labels.data()[i];
        let w = weights.map_or(1.0, |w| w[i]);
        value += w * (-l * p.ln() - (1.0 - l) * (1.0 - p).ln());
        grad.push(w * (p - l) / (p * (1.0 - p)) / nf);
    }
    Ok(LossValue {
        value: value / nf,
        grad: Tensor::new(vec![n, 1], grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64, l: f64) -> f64 {
        let p = Tensor::new(vec![1, 1], vec![p]).unwrap();
        let l = Tensor::new(vec![1, 1], vec![l]).unwrap();
        bce_loss(&p, &l, None).unwrap().value
    }

    #[test]
    fn reference_values() {
        assert!(one(1.0 - PROB_EPS, 1.0) < 1e-6);
        assert!((one(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((one(0.9, 0.0) - 10f64.ln()).abs() < 1e-12);
        assert!(one(0.0, 1.0).is_finite());
    }

    #[test]
    fn rejects_bad_labels() {
        let p = Tensor::new(vec![2, 1], vec![0.3, 0.4]).unwrap();
        let l = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(bce_loss(&p, &l, None), Err(Error::Validation(_))));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let probs = [0.2, 0.7, 0.55];
        let labels = Tensor::new(vec![3, 1], vec![1.0, 0.0, 1.0]).unwrap();
        let w = [0.5, 2.0, 1.0];
        let at = |ps: &[f64]| {
            let p = Tensor::new(vec![3, 1], ps.to_vec()).unwrap();
            bce_loss(&p, &labels, Some(&w)).unwrap()
        };
        let g = at(&probs).grad;
        for i in 0..3 {
            let mut hi = probs;
            let mut lo = probs;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (at(&hi).value - at(&lo).value) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6, "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn strictly_decreasing_for_positive_label() {
        let mut prev = f64::INFINITY;
        for k in 0..=1000 {
            let p = PROB_EPS + (1.0 - 2.0 * PROB_EPS) * k as f64 / 1000.0;
            let v = one(p, 1.0);
            assert!(v < prev);
            prev = v;
        }
    }
}
