use crate::error::{check_shape, NnError, Result};
use crate::param::{Module, Param};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;
use hmap_core::rng::SplitMix64;

/// Affine map `y = W x + b` applied to every row of a `[B, ...]` input; the
/// trailing axes are flattened.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct DenseCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    /// `gain` as in [`Param::kaiming_uniform`].
    pub fn new(name: &str, in_features: usize, out_features: usize, gain: f64, rng: &mut SplitMix64) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::kaiming_uniform(format!("{name}.weight"), &[out_features, in_features], in_features, gain, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_features]),
        }
    }

    fn batch_of(&self, x: &Tensor<T>) -> Result<usize> {
        let b = x.shape().first().copied().unwrap_or(0);
        if x.shape().len() < 2 || x.len() != b * self.in_features {
            return Err(NnError::Shape { op: "dense", expected: vec![b, self.in_features], got: x.shape().to_vec() });
        }
        Ok(b)
    }

    /// Forward pass without keeping the input.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = self.batch_of(x)?;
        let mut y = Tensor::zeros(&[b, self.out_features]);
        for r in 0..b {
            y.outer_mut(r).copy_from_slice(self.bias.value.data());
        }
        matmul(false, true, b, self.out_features, self.in_features, T::one(), x.data(), self.weight.value.data(), T::one(), y.data_mut());
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let y = self.apply(x)?;
        Ok((y, DenseCache { input: x.clone() }))
    }

    /// Returns the input gradient shaped like the original input.
    pub fn backward(&mut self, cache: &DenseCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = &cache.input;
        let b = x.dim(0);
        check_shape("dense backward", &[b, self.out_features], dy.shape())?;
        matmul(true, false, self.out_features, self.in_features, b, T::one(), dy.data(), x.data(), T::one(), self.weight.grad.data_mut());
        for r in 0..b {
            for (g, d) in self.bias.grad.data_mut().iter_mut().zip(dy.outer(r)) {
                *g += *d;
            }
        }
        let mut dx = Tensor::zeros(x.shape());
        matmul(false, false, b, self.in_features, self.out_features, T::one(), dy.data(), self.weight.value.data(), T::zero(), dx.data_mut());
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
