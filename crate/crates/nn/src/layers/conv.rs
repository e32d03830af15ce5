//! Strided 2-D convolution (cross-correlation) and its adjoint, the
//! transposed convolution, both via im2col and a single matrix product per
//! sample.

use crate::error::{NnError, Result};
use crate::param::{Module, Param};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;
use hmap_core::rng::SplitMix64;

/// Output extent of a convolution along one axis.
pub fn conv_out(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (n + 2 * padding).checked_sub(kernel).map(|d| d / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Visits every (column-matrix offset, image offset) pair that lies
    /// inside the image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.p as isize;
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let base = row * self.cols();
                    for oy in 0..self.ho {
                        let iy = (oy * self.s) as isize - p + ki as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let img_row = (c * self.h + iy as usize) * self.w;
                        for ox in 0..self.wo {
                            let ix = (ox * self.s) as isize - p + kj as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(base + oy * self.wo + ox, img_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each(|ci, ii| cols[ci] = img[ii]);
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        self.for_each(|ci, ii| img[ii] += cols[ci]);
    }
}

fn check_input<T: Scalar>(op: &'static str, x: &Tensor<T>, c: usize) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 4 || x.dim(1) != c {
        return Err(NnError::Shape { op, expected: vec![x.shape().first().copied().unwrap_or(0), c, 0, 0], got: x.shape().to_vec() });
    }
    Ok((x.dim(0), x.dim(2), x.dim(3)))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in * k * k]`, row order (channel, ky, kx).
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    geom: Geometry,
    batch: usize,
    cols: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::kaiming_uniform(format!("{name}.weight"), &[out_channels, fan_in], fan_in, 6.0, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((conv_out(h, self.kernel, self.stride, self.padding)?, conv_out(w, self.kernel, self.stride, self.padding)?))
    }

    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let (ho, wo) = self.output_hw(h, w).ok_or(NnError::Shape {
            op: "conv2d",
            expected: vec![self.kernel, self.kernel],
            got: vec![h, w],
        })?;
        Ok(Geometry { c: self.in_channels, h, w, k: self.kernel, s: self.stride, p: self.padding, ho, wo })
    }

    /// `[B, C_in, H, W] -> [B, C_out, H', W']`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Conv2dCache<T>)> {
        let (b, h, w) = check_input("conv2d", x, self.in_channels)?;
        let g = self.geometry(h, w)?;
        let (rows, cols_n) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); b * rows * cols_n];
        let mut y = Tensor::zeros(&[b, self.out_channels, g.ho, g.wo]);
        for i in 0..b {
            let ci = &mut cols[i * rows * cols_n..(i + 1) * rows * cols_n];
            g.im2col(x.outer(i), ci);
            let yi = y.outer_mut(i);
            for (o, bias) in self.bias.value.data().iter().enumerate() {
                yi[o * cols_n..(o + 1) * cols_n].iter_mut().for_each(|v| *v = *bias);
            }
            matmul(false, false, self.out_channels, cols_n, rows, T::one(), self.weight.value.data(), ci, T::one(), yi);
        }
        Ok((y, Conv2dCache { geom: g, batch: b, cols }))
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = cache.geom;
        let expect = [cache.batch, self.out_channels, g.ho, g.wo];
        crate::error::check_shape("conv2d backward", &expect, dy.shape())?;
        let (rows, cols_n) = (g.rows(), g.cols());
        let mut dx = Tensor::zeros(&[cache.batch, g.c, g.h, g.w]);
        let mut dcols = vec![T::zero(); rows * cols_n];
        for i in 0..cache.batch {
            let ci = &cache.cols[i * rows * cols_n..(i + 1) * rows * cols_n];
            let dyi = dy.outer(i);
            matmul(false, true, self.out_channels, rows, cols_n, T::one(), dyi, ci, T::one(), self.weight.grad.data_mut());
            for (o, db) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *db += dyi[o * cols_n..(o + 1) * cols_n].iter().copied().sum::<T>();
            }
            matmul(true, false, rows, cols_n, self.out_channels, T::one(), self.weight.value.data(), dyi, T::zero(), &mut dcols);
            g.col2im_add(&dcols, dx.outer_mut(i));
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Adjoint of a strided [`Conv2d`] with an explicit output size, so that a
/// stack of them can reproduce the encoder's spatial trace exactly.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_hw: (usize, usize),
    /// `[in, out * k * k]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2dCache<T> {
    geom: Geometry,
    input: Tensor<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        out_hw: (usize, usize),
        gain: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        // each output pixel receives about in * k * k / stride^2 terms
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            out_hw,
            weight: Param::kaiming_uniform(
                format!("{name}.weight"),
                &[in_channels, out_channels * kernel * kernel],
                fan_in,
                gain,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
        }
    }

    fn geometry(&self, hi: usize, wi: usize) -> Result<Geometry> {
        let (h, w) = self.out_hw;
        let g = Geometry {
            c: self.out_channels,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            ho: conv_out(h, self.kernel, self.stride, self.padding).unwrap_or(0),
            wo: conv_out(w, self.kernel, self.stride, self.padding).unwrap_or(0),
        };
        if (g.ho, g.wo) != (hi, wi) {
            return Err(NnError::Shape { op: "conv_transpose2d", expected: vec![g.ho, g.wo], got: vec![hi, wi] });
        }
        Ok(g)
    }

    /// `[B, C_in, h, w] -> [B, C_out, out_hw.0, out_hw.1]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvTranspose2dCache<T>)> {
        let (b, hi, wi) = check_input("conv_transpose2d", x, self.in_channels)?;
        let g = self.geometry(hi, wi)?;
        let (rows, cols_n) = (g.rows(), g.cols());
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut y = Tensor::zeros(&[b, self.out_channels, g.h, g.w]);
        let plane = g.h * g.w;
        for i in 0..b {
            matmul(true, false, rows, cols_n, self.in_channels, T::one(), self.weight.value.data(), x.outer(i), T::zero(), &mut cols);
            let yi = y.outer_mut(i);
            g.col2im_add(&cols, yi);
            for (o, bias) in self.bias.value.data().iter().enumerate() {
                yi[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += *bias);
            }
        }
        Ok((y, ConvTranspose2dCache { geom: g, input: x.clone() }))
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = cache.geom;
        let b = cache.input.dim(0);
        crate::error::check_shape("conv_transpose2d backward", &[b, g.c, g.h, g.w], dy.shape())?;
        let (rows, cols_n) = (g.rows(), g.cols());
        let plane = g.h * g.w;
        let mut cols = vec![T::zero(); rows * cols_n];
        let mut dx = Tensor::zeros(cache.input.shape());
        for i in 0..b {
            let dyi = dy.outer(i);
            g.im2col(dyi, &mut cols);
            matmul(false, false, self.in_channels, cols_n, rows, T::one(), self.weight.value.data(), &cols, T::zero(), dx.outer_mut(i));
            matmul(false, true, self.in_channels, rows, cols_n, T::one(), cache.input.outer(i), &cols, T::one(), self.weight.grad.data_mut());
            for (o, db) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *db += dyi[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
