use crate::error::{check_shape, NnError, Result};
use crate::param::{Module, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalises each row of `[B, F]` to zero mean and unit variance, then
/// applies a learned per-feature scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub features: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(name: &str, features: usize) -> Self {
        Self {
            features,
            gamma: Param::new(format!("{name}.gamma"), Tensor::filled(&[features], T::one())),
            beta: Param::zeros(format!("{name}.beta"), &[features]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, LayerNormCache<T>)> {
        if x.shape().len() != 2 || x.dim(1) != self.features {
            return Err(NnError::Shape { op: "layer_norm", expected: vec![0, self.features], got: x.shape().to_vec() });
        }
        let (b, f) = (x.dim(0), self.features);
        let nf = T::of(f as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(b);
        for r in 0..b {
            let row = x.outer(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.outer_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (*v - mean) * is;
            }
            let yr = y.outer_mut(r);
            for j in 0..f {
                yr[j] = xhat.outer(r)[j] * self.gamma.value.data()[j] + self.beta.value.data()[j];
            }
        }
        Ok((y, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        check_shape("layer_norm backward", cache.xhat.shape(), dy.shape())?;
        let (b, f) = (dy.dim(0), self.features);
        let nf = T::of(f as f64);
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![T::zero(); f];
        for r in 0..b {
            let (dyr, xh) = (dy.outer(r), cache.xhat.outer(r));
            let gamma = self.gamma.value.data();
            for j in 0..f {
                dxhat[j] = dyr[j] * gamma[j];
            }
            {
                let gg = self.gamma.grad.data_mut();
                for j in 0..f {
                    gg[j] += dyr[j] * xh[j];
                }
            }
            for (g, d) in self.beta.grad.data_mut().iter_mut().zip(dyr) {
                *g += *d;
            }
            let s1 = dxhat.iter().copied().sum::<T>();
            let s2 = dxhat.iter().zip(xh).map(|(a, b)| *a * *b).sum::<T>();
            let is = cache.inv_std[r];
            for (j, o) in dx.outer_mut(r).iter_mut().enumerate() {
                *o = is / nf * (nf * dxhat[j] - s1 - xh[j] * s2);
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

pub fn relu<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    x
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape("relu backward", y.shape(), dy.shape())?;
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(y.data()) {
        if *v <= T::zero() {
            *d = T::zero();
        }
    }
    Ok(dx)
}
