use crate::error::{Error, Result};
use crate::numerics::tensor::linalg;
use crate::numerics::{Scalar, Tensor};

/// Cross entropy of `softmax(logits)` against `label`, with its gradient
/// w.r.t. the logits (`softmax(logits) - onehot(label)`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let (loss, grad) = softmax_cross_entropy_slice(logits.data(), label)?;
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub(crate) fn softmax_cross_entropy_slice<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::input(format!("need at least 2 classes, got {k}")));
    }
    if label >= k {
        return Err(Error::input(format!("label {label} out of range for {k} classes")));
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = logits.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    let loss = lse - logits[label];
    if !loss.is_finite() {
        return Err(Error::numeric("non-finite cross-entropy loss"));
    }
    let mut grad = linalg::softmax(logits);
    grad[label] = grad[label] - T::one();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_logits() {
        let (loss, g) = softmax_cross_entropy(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.data()[0] + 0.5).abs() < 1e-15 && (g.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_class() {
        let (loss, g) = softmax_cross_entropy(&Tensor::vector(vec![10.0, -10.0]).unwrap(), 0).unwrap();
        assert!(loss < 1e-8);
        assert!(g.max_abs() < 1e-8);
    }

    #[test]
    fn matches_central_difference() {
        let logits = [1.0, 0.5];
        let (_, g) = softmax_cross_entropy_slice(&logits, 1).unwrap();
        let eps = 1e-5;
        for i in 0..2 {
            let mut hi = logits;
            let mut lo = logits;
            hi[i] += eps;
            lo[i] -= eps;
            let f = |l: &[f64]| softmax_cross_entropy_slice(l, 1).unwrap().0;
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6, "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn label_out_of_range() {
        let t = Tensor::vector(vec![0.0, 1.0]).unwrap();
        assert!(matches!(softmax_cross_entropy(&t, 2), Err(Error::Input(_))));
    }
}
