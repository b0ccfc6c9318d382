//! Minimal layer library with explicit forward caches and hand-written
//! backward passes: same-padded 2-D convolution (im2col + GEMM), fully
//! connected layers, ReLU and the parameter bookkeeping shared by the
//! optimizers and the weights archive.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

/// A learnable buffer with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    /// Uniform in `±gain·sqrt(3/fan_in)`, i.e. variance `gain²/fan_in`.
    pub fn uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        for v in &mut p.value {
            *v = T::from_f64(rng.gen_range(-bound..=bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            shape: self.shape.clone(),
            value: self.value.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self.grad.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Named traversal over every parameter of a model.
///
/// Names are dotted paths (`fpn.lateral2.weight`); the traversal order is
/// fixed so optimizers and archives can rely on it.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    fn scale_grads(&mut self, s: T) {
        self.visit_mut("", &mut |_, p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Square-kernel convolution with "same" padding (`(k-1)/2`) and a bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct ConvCache<T> {
    /// im2col matrix, or the raw input for 1×1 stride-1 kernels.
    cols: Vec<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::uniform(&[out_channels, in_channels, kernel, kernel], fan_in, gain, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        ((h + 2 * p - self.kernel) / self.stride + 1, (w + 2 * p - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn im2col(&self, x: &Tensor<T>, oh: usize, ow: usize) -> Vec<T> {
        let (c_in, h, w) = x.shape();
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad() as isize;
        let npos = oh * ow;
        let mut cols = vec![T::zero(); c_in * k * k * npos];
        for c in 0..c_in {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], in_shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor<T> {
        let (c_in, h, w) = in_shape;
        let k = self.kernel;
        let s = self.stride;
        let p = self.pad() as isize;
        let npos = oh * ow;
        let mut dx = Tensor::zeros(c_in, h, w);
        let data = dx.data_mut();
        for c in 0..c_in {
            let plane = &mut data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (oh, ow) = self.output_hw(x.height(), x.width());
        let cols = if self.is_pointwise() { x.data().to_vec() } else { self.im2col(x, oh, ow) };
        let npos = oh * ow;
        let rows = self.in_channels * self.kernel * self.kernel;
        let mut out = vec![T::zero(); self.out_channels * npos];
        for (o, chunk) in out.chunks_mut(npos).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(
            Mat::new(&self.weight.value, self.out_channels, rows),
            Mat::new(&cols, rows, npos),
            T::one(),
            &mut out,
        );
        let y = Tensor::from_vec(self.out_channels, oh, ow, out)?;
        Ok((y, ConvCache { cols, in_shape: x.shape(), out_hw: (oh, ow) }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (oh, ow) = cache.out_hw;
        let npos = oh * ow;
        assert_eq!(dy.shape(), (self.out_channels, oh, ow), "conv upstream gradient shape");
        let rows = self.in_channels * self.kernel * self.kernel;
        let dyd = dy.data();
        gemm(
            Mat::new(dyd, self.out_channels, npos),
            Mat::new(&cache.cols, rows, npos).t(),
            T::one(),
            &mut self.weight.grad,
        );
        for (o, chunk) in dyd.chunks(npos).enumerate() {
            self.bias.grad[o] += chunk.iter().copied().sum::<T>();
        }
        let mut dcols = vec![T::zero(); rows * npos];
        gemm(
            Mat::new(&self.weight.value, self.out_channels, rows).t(),
            Mat::new(dyd, self.out_channels, npos),
            T::zero(),
            &mut dcols,
        );
        if self.is_pointwise() {
            let (c, h, w) = cache.in_shape;
            Tensor::from_vec(c, h, w, dcols).expect("pointwise gradient shape")
        } else {
            self.col2im(&dcols, cache.in_shape, oh, ow)
        }
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Fully connected layer over a row-major `(n × in)` batch.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, gain: f64, rng: &mut impl Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::uniform(&[out_features, in_features], in_features, gain, rng),
            bias: Param::zeros(&[out_features]),
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        assert_eq!(x.len(), n * self.in_features, "linear input size");
        let mut out = Vec::with_capacity(n * self.out_features);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(
            Mat::new(x, n, self.in_features),
            Mat::new(&self.weight.value, self.out_features, self.in_features).t(),
            T::one(),
            &mut out,
        );
        out
    }

    /// `x` is the forward input; returns the input gradient.
    pub fn backward(&mut self, x: &[T], n: usize, dy: &[T]) -> Vec<T> {
        assert_eq!(dy.len(), n * self.out_features, "linear upstream gradient size");
        gemm(
            Mat::new(dy, n, self.out_features).t(),
            Mat::new(x, n, self.in_features),
            T::one(),
            &mut self.weight.grad,
        );
        for row in dy.chunks(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = vec![T::zero(); n * self.in_features];
        gemm(
            Mat::new(dy, n, self.out_features),
            Mat::new(&self.weight.value, self.out_features, self.in_features),
            T::zero(),
            &mut dx,
        );
        dx
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_slice<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(dy.data()).map(|(&o, &g)| if o > T::zero() { g } else { T::zero() }).collect();
    Tensor::from_vec(y.channels(), y.height(), y.width(), data).expect("relu gradient shape")
}

pub fn relu_backward_slice<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (g, &o) in dy.iter_mut().zip(y) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
