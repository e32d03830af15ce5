use crate::error::{check_shape, NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error over all elements and its gradient.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_shape("mse", target.shape(), pred.shape())?;
    if pred.is_empty() {
        return Err(NnError::EmptyMask("mse"));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p.f64() - t.f64();
        sum += d * d;
        *g = T::of(2.0 * d / n);
    }
    Ok((sum / n, grad))
}

/// Mean squared error over the elements where `mask` is true.
pub fn masked_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<(f64, Tensor<T>)> {
    check_shape("masked_mse", target.shape(), pred.shape())?;
    check_shape("masked_mse mask", &[pred.len()], &[mask.len()])?;
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(NnError::EmptyMask("masked_mse"));
    }
    let n = count as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for (((g, p), t), m) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()).zip(mask) {
        if *m {
            let d = p.f64() - t.f64();
            sum += d * d;
            *g = T::of(2.0 * d / n);
        }
    }
    Ok((sum / n, grad))
}
