//! Gated recurrent unit:
//!
//! ```text
//! z  = sigmoid(W_z x + U_z h + b_z)
//! r  = sigmoid(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + r * (U_n h) + b_n)
//! h' = (1 - z) * n + z * h
//! ```
//!
//! Gate blocks are stacked in the order z, r, n.

use crate::error::{check_shape, NnError, Result};
use crate::param::{Module, Param};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;
use hmap_core::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct GruCell<T> {
    pub input_size: usize,
    pub hidden_size: usize,
    /// `[3H, in]`.
    pub w: Param<T>,
    /// `[3H, H]`.
    pub u: Param<T>,
    /// `[3H]`.
    pub b: Param<T>,
}

#[derive(Debug, Clone)]
pub struct GruCache<T> {
    x: Tensor<T>,
    h: Tensor<T>,
    z: Vec<T>,
    r: Vec<T>,
    n: Vec<T>,
    uh_n: Vec<T>,
}

impl<T> GruCache<T> {
    pub fn gates(&self) -> (&[T], &[T], &[T]) {
        (&self.z, &self.r, &self.n)
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> GruCell<T> {
    pub fn new(name: &str, input_size: usize, hidden_size: usize, rng: &mut SplitMix64) -> Self {
        let h3 = 3 * hidden_size;
        Self {
            input_size,
            hidden_size,
            w: Param::kaiming_uniform(format!("{name}.w"), &[h3, input_size], input_size, 3.0, rng),
            u: Param::kaiming_uniform(format!("{name}.u"), &[h3, hidden_size], hidden_size, 3.0, rng),
            b: Param::zeros(format!("{name}.b"), &[h3]),
        }
    }

    /// `x: [B, in]`, `h: [B, H]` -> `h': [B, H]`.
    pub fn forward(&self, x: &Tensor<T>, h: &Tensor<T>) -> Result<(Tensor<T>, GruCache<T>)> {
        let hs = self.hidden_size;
        if x.shape().len() != 2 || x.dim(1) != self.input_size {
            return Err(NnError::Shape { op: "gru", expected: vec![0, self.input_size], got: x.shape().to_vec() });
        }
        let bsz = x.dim(0);
        check_shape("gru hidden", &[bsz, hs], h.shape())?;
        let mut ax = vec![T::zero(); bsz * 3 * hs];
        for r in 0..bsz {
            ax[r * 3 * hs..(r + 1) * 3 * hs].copy_from_slice(self.b.value.data());
        }
        matmul(false, true, bsz, 3 * hs, self.input_size, T::one(), x.data(), self.w.value.data(), T::one(), &mut ax);
        let mut ah = vec![T::zero(); bsz * 3 * hs];
        matmul(false, true, bsz, 3 * hs, hs, T::one(), h.data(), self.u.value.data(), T::zero(), &mut ah);
        let n_el = bsz * hs;
        let (mut z, mut rg, mut n, mut uh_n) = (vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el]);
        let mut out = Tensor::zeros(&[bsz, hs]);
        for row in 0..bsz {
            let (axr, ahr) = (&ax[row * 3 * hs..], &ah[row * 3 * hs..]);
            for j in 0..hs {
                let k = row * hs + j;
                z[k] = sigmoid(axr[j] + ahr[j]);
                rg[k] = sigmoid(axr[hs + j] + ahr[hs + j]);
                uh_n[k] = ahr[2 * hs + j];
                n[k] = (axr[2 * hs + j] + rg[k] * uh_n[k]).tanh();
                out.data_mut()[k] = (T::one() - z[k]) * n[k] + z[k] * h.data()[k];
            }
        }
        Ok((out, GruCache { x: x.clone(), h: h.clone(), z, r: rg, n, uh_n }))
    }

    /// Returns `(dx, dh)` and accumulates parameter gradients.
    pub fn backward(&mut self, c: &GruCache<T>, dh_next: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let hs = self.hidden_size;
        let bsz = c.x.dim(0);
        check_shape("gru backward", &[bsz, hs], dh_next.shape())?;
        let mut gx = vec![T::zero(); bsz * 3 * hs];
        let mut gh = vec![T::zero(); bsz * 3 * hs];
        let mut dh = Tensor::zeros(&[bsz, hs]);
        for row in 0..bsz {
            for j in 0..hs {
                let k = row * hs + j;
                let d = dh_next.data()[k];
                let (z, r, n) = (c.z[k], c.r[k], c.n[k]);
                let dn = d * (T::one() - z);
                let dz = d * (c.h.data()[k] - n);
                dh.data_mut()[k] = d * z;
                let da_n = dn * (T::one() - n * n);
                let da_z = dz * z * (T::one() - z);
                let da_r = da_n * c.uh_n[k] * r * (T::one() - r);
                let base = row * 3 * hs;
                gx[base + j] = da_z;
                gx[base + hs + j] = da_r;
                gx[base + 2 * hs + j] = da_n;
                gh[base + j] = da_z;
                gh[base + hs + j] = da_r;
                gh[base + 2 * hs + j] = da_n * r;
            }
        }
        matmul(true, false, 3 * hs, self.input_size, bsz, T::one(), &gx, c.x.data(), T::one(), self.w.grad.data_mut());
        matmul(true, false, 3 * hs, hs, bsz, T::one(), &gh, c.h.data(), T::one(), self.u.grad.data_mut());
        for row in 0..bsz {
            for (g, v) in self.b.grad.data_mut().iter_mut().zip(&gx[row * 3 * hs..(row + 1) * 3 * hs]) {
                *g += *v;
            }
        }
        let mut dx = Tensor::zeros(c.x.shape());
        matmul(false, false, bsz, self.input_size, 3 * hs, T::one(), &gx, self.w.value.data(), T::zero(), dx.data_mut());
        matmul(false, false, bsz, hs, 3 * hs, T::one(), &gh, self.u.value.data(), T::one(), dh.data_mut());
        Ok((dx, dh))
    }
}

impl<T: Scalar> Module<T> for GruCell<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w, &self.u, &self.b]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.u, &mut self.b]
    }
}
