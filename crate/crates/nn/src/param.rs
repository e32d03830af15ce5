use crate::scalar::Scalar;
use crate::tensor::Tensor;
use hmap_core::rng::SplitMix64;

/// Trainable tensor with its gradient accumulator and AdamW moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
    /// Multiplier on the optimizer learning rate; 0 freezes the tensor.
    pub lr_scale: f64,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
            lr_scale: 1.0,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    /// Uniform fan-in initialisation, `U(-sqrt(gain/fan_in), sqrt(gain/fan_in))`.
    /// `gain` 6 suits layers feeding a ReLU, 3 gives unit variance for
    /// linear outputs.
    pub fn kaiming_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut SplitMix64) -> Self {
        let bound = (gain / fan_in as f64).sqrt();
        Self::new(name, Tensor::from_fn(shape, |_| T::of(rng.uniform(-bound, bound))))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters, visited in a fixed order.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn set_lr_scale(&mut self, s: f64) {
        self.params_mut().into_iter().for_each(|p| p.lr_scale = s);
    }

    fn grad_norm(&self) -> f64 {
        self.params().iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
    }
}
