use super::{NnError, Result};
use crate::tensor::{Element, Tensor, TensorError};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-wise softmax over `[N, K]` logits, computed with max-subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, k] = logits.shape() else {
        return Err(NnError::Input(format!("softmax expects [N,K], got {:?}", logits.shape())));
    };
    if k < 2 {
        return Err(NnError::Input("softmax needs at least 2 classes".into()));
    }
    let mut out = vec![T::zero(); logits.len()];
    for (o, row) in out.chunks_mut(k).zip(logits.data().chunks(k)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum = sum + *ov;
        }
        // Saturated rows would otherwise round to exact 0 or 1; keep every
        // entry strictly inside the unit interval (a one-ulp adjustment).
        let hi = T::one() - T::epsilon() / T::from_f64_lossy(2.0);
        let lo = T::min_positive_value();
        o.iter_mut().for_each(|v| *v = (*v / sum).max(lo).min(hi));
    }
    Ok(Tensor::new(logits.shape(), out)?)
}

pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(NnError::Input("one_hot needs at least one label".into()));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes])?;
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(NnError::Input(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

/// Validates one-hot rows and returns the hot index of each.
fn hot_indices<T: Element>(probs: &Tensor<T>, onehot: &Tensor<T>) -> Result<Vec<usize>> {
    if probs.shape() != onehot.shape() || probs.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            left: probs.shape().to_vec(),
            right: onehot.shape().to_vec(),
        }
        .into());
    }
    let k = probs.shape()[1];
    onehot
        .data()
        .chunks(k)
        .enumerate()
        .map(|(i, row)| {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != k - 1 {
                return Err(NnError::Input(format!("row {i} is not a valid one-hot vector")));
            }
            Ok(row.iter().position(|&v| v == T::one()).expect("one hot entry"))
        })
        .collect()
}

/// Mean categorical cross-entropy `−(1/N)·Σ w_i·log p[i, label_i]`.
///
/// `class_weights`, when given, scales each sample's term by the weight of its
/// true class.
pub fn cross_entropy<T: Element>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    class_weights: Option<&[f64]>,
) -> Result<f64> {
    let labels = hot_indices(probs, onehot)?;
    let k = probs.shape()[1];
    let mut total = 0.0f64;
    for (row, &l) in probs.data().chunks(k).zip(&labels) {
        let p = row[l].to_f64_lossy().max(PROB_FLOOR);
        let w = class_weights.map_or(1.0, |w| w[l]);
        total -= w * p.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of [`cross_entropy`] with respect to the probabilities:
/// `−w_i / (N·p[i, label_i])` at the true class, zero elsewhere.
pub fn cross_entropy_grad<T: Element>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    class_weights: Option<&[f64]>,
) -> Result<Tensor<T>> {
    let labels = hot_indices(probs, onehot)?;
    let (n, k) = (labels.len(), probs.shape()[1]);
    let mut g = vec![T::zero(); probs.len()];
    for (i, &l) in labels.iter().enumerate() {
        let p = probs.data()[i * k + l].to_f64_lossy().max(PROB_FLOOR);
        let w = class_weights.map_or(1.0, |w| w[l]);
        g[i * k + l] = T::from_f64_lossy(-w / (n as f64 * p));
    }
    Ok(Tensor::new(probs.shape(), g)?)
}

/// Fused softmax + cross-entropy gradient on the logits:
/// `w_i·(probs − onehot) / N`.
pub fn softmax_cross_entropy_grad<T: Element>(
    probs: &Tensor<T>,
    onehot: &Tensor<T>,
    class_weights: Option<&[f64]>,
) -> Result<Tensor<T>> {
    let labels = hot_indices(probs, onehot)?;
    let (n, k) = (labels.len(), probs.shape()[1]);
    let inv_n = T::from_f64_lossy(1.0 / n as f64);
    let mut g = probs.sub(onehot)?;
    for (row, &l) in g.data_mut().chunks_mut(k).zip(&labels) {
        let w = T::from_f64_lossy(class_weights.map_or(1.0, |w| w[l]));
        row.iter_mut().for_each(|v| *v = *v * w * inv_n);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits() {
        let p = softmax(&Tensor::full(&[2, 4], 3.0f64).unwrap()).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn closed_form_logits() {
        let p = softmax(&Tensor::new(&[1, 3], vec![0.0f64, 2f64.ln(), 3f64.ln()]).unwrap()).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_logits_stay_finite() {
        let p = softmax(&Tensor::new(&[1, 3], vec![1000.0f32, 0.0, -1000.0]).unwrap()).unwrap();
        assert!(p.all_finite());
        assert!(p.data()[0] < 1.0 && 1.0 - p.data()[0] <= f32::EPSILON);
        assert!(p.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn perfect_and_uniform_losses() {
        let onehot = one_hot::<f64>(&[0, 2], 3).unwrap();
        assert_eq!(cross_entropy(&onehot, &onehot, None).unwrap(), 0.0);
        let uniform = Tensor::full(&[2, 3], 1.0 / 3.0).unwrap();
        assert!((cross_entropy(&uniform, &onehot, None).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!((3f64.ln() - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn malformed_one_hot_is_rejected() {
        let p = Tensor::full(&[1, 3], 1.0f32 / 3.0).unwrap();
        let bad = Tensor::new(&[1, 3], vec![1.0f32, 1.0, 0.0]).unwrap();
        assert!(cross_entropy(&p, &bad, None).is_err());
        let bad = Tensor::new(&[1, 3], vec![0.5f32, 0.5, 0.0]).unwrap();
        assert!(softmax_cross_entropy_grad(&p, &bad, None).is_err());
    }

    #[test]
    fn uniform_class_weights_change_nothing() {
        let logits = Tensor::new(&[3, 3], vec![0.1f64, 2.0, -1.0, 0.3, 0.3, 0.9, -2.0, 0.0, 1.0]).unwrap();
        let p = softmax(&logits).unwrap();
        let y = one_hot(&[1, 2, 0], 3).unwrap();
        let plain = cross_entropy(&p, &y, None).unwrap();
        let weighted = cross_entropy(&p, &y, Some(&[1.0, 1.0, 1.0])).unwrap();
        assert!((plain - weighted).abs() <= 1e-6);
    }

    #[test]
    fn fused_gradient_matches_finite_differences() {
        let logits = Tensor::new(&[2, 3], vec![0.2f64, -0.7, 1.1, 0.5, 0.4, -0.3]).unwrap();
        let y = one_hot(&[2, 0], 3).unwrap();
        let g = softmax_cross_entropy_grad(&softmax(&logits).unwrap(), &y, None).unwrap();
        let eps = 1e-3;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += eps;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= eps;
            let lp = cross_entropy(&softmax(&plus).unwrap(), &y, None).unwrap();
            let lm = cross_entropy(&softmax(&minus).unwrap(), &y, None).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (numeric - g.data()[i]).abs() / numeric.abs().max(g.data()[i].abs());
            assert!(rel <= 1e-2, "coord {i}: {numeric} vs {}", g.data()[i]);
        }
    }

    proptest! {
        #[test]
        fn rows_normalized_and_shift_invariant(
            vals in proptest::collection::vec(-20.0f64..20.0, 6),
            shift in -50.0f64..50.0,
        ) {
            let x = Tensor::new(&[2, 3], vals).unwrap();
            let p = softmax(&x).unwrap();
            for row in p.data().chunks(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let q = softmax(&x.add_scalar(shift)).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
