use super::{ParamKind, ParamMut};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot) / N`, stabilized by subtracting each row's max.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::Shape(format!("logits must be N×K, got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, {k})")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    let inv_n = 1.0 / n as f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        loss += total.ln() - (row[label].as_f64() - max);
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push(T::cast_f64((e / total - onehot) * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Adds `(c/2)·Σw²` over weight tensors to the loss and `c·w` to their
/// gradients. Biases, BN scale/shift and scalar multipliers/biases are skipped.
pub fn l2_penalty<'a, T: Real + 'a>(
    params: impl IntoIterator<Item = ParamMut<'a, T>>,
    coefficient: f64,
) -> f64 {
    if coefficient == 0.0 {
        return 0.0;
    }
    let c = T::cast_f64(coefficient);
    let mut penalty = 0.0;
    for p in params {
        if p.kind != ParamKind::Weight {
            continue;
        }
        penalty += p.value.data().iter().map(|w| w.as_f64().powi(2)).sum::<f64>();
        for (g, &w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            *g += c * w;
        }
    }
    0.5 * coefficient * penalty
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Param;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 10]).unwrap();
        let (loss, _) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn huge_true_logit_is_stable() {
        let logits = Tensor::<f64>::from_f64(&[1, 3], &[0.0, 1000.0, 0.0]).unwrap();
        let (loss, grad) = softmax_xent(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.all_finite());
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        assert!(softmax_xent(&logits, &[3]).is_err());
    }

    #[test]
    fn l2_hand_values() {
        let mut w = Param::new(Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap());
        let mut b = Param::new(Tensor::<f64>::from_f64(&[1], &[5.0]).unwrap());
        let pen = l2_penalty([w.view("w", ParamKind::Weight), b.view("b", ParamKind::Bias)], 5e-4);
        assert!((pen - 1e-3).abs() < 1e-15);
        assert!((w.grad.data()[0] - 1e-3).abs() < 1e-15);
        assert_eq!(b.grad.data()[0], 0.0);

        let mut w0 = Param::new(Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap());
        assert_eq!(l2_penalty([w0.view("w", ParamKind::Weight)], 0.0), 0.0);
        assert_eq!(w0.grad.data()[0], 0.0);
    }
}
