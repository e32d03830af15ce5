use crate::param::Param;
use crate::scalar::Scalar;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamW {
    /// One update of every parameter with a nonzero `lr_scale`.
    pub fn step<'a, T: Scalar>(&self, params: impl IntoIterator<Item = &'a mut Param<T>>, lr: f64) {
        for p in params {
            if p.lr_scale == 0.0 {
                continue;
            }
            let lr = lr * p.lr_scale;
            p.step += 1;
            let bc1 = 1.0 - self.beta1.powi(p.step as i32);
            let bc2 = 1.0 - self.beta2.powi(p.step as i32);
            let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
            let (c1, c2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
            let decay = T::of(1.0 - lr * self.weight_decay);
            let (lr_t, bc1, bc2, eps) = (T::of(lr), T::of(bc1), T::of(bc2), T::of(self.eps));
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + c1 * *gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + c2 * *gi * *gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                if self.weight_decay != 0.0 {
                    *w *= decay;
                }
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescales gradients so that their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<'a, T: Scalar>(params: impl IntoIterator<Item = &'a mut Param<T>>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Param<T>> = params.into_iter().collect();
    let norm = params.iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.scale(s);
        }
    }
    norm
}

/// Halves the learning rate when the monitored loss stops improving.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        Self { lr, factor: 0.5, patience: 3, threshold: 1e-4, min_lr: 1e-6, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Starts from a known reference loss (typically the loss before the
    /// first epoch).
    pub fn with_reference(lr: f64, reference: f64) -> Self {
        Self { best: reference, ..Self::new(lr) }
    }

    /// Records one epoch's loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
