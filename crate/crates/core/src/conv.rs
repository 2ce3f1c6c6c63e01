//! Stride-1, zero-padded ("same") 2D cross-correlation and its exact
//! reverse-mode gradient.
//!
//! Both directions lower to one matrix product over pixels: the input is
//! unfolded into a `(H·W) × (kh·kw·C_in)` patch matrix (skipped for `1×1`
//! kernels, where the tensor already is that matrix) and multiplied by the
//! `(kh·kw·C_in) × C_out` weight matrix.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::{Shape, Tensor};
use crate::Real;

/// Convolution weights laid out `kh × kw × in_channels × out_channels`
/// (row-major) plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    kh: usize,
    kw: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn zeros(kh: usize, kw: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        let n = check_dims(kh, kw, in_channels, out_channels)?;
        Ok(Self {
            kh,
            kw,
            in_channels,
            out_channels,
            weights: vec![T::zero(); n],
            bias: vec![T::zero(); out_channels],
        })
    }

    pub fn from_parts(
        kh: usize,
        kw: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let n = check_dims(kh, kw, in_channels, out_channels)?;
        if weights.len() != n {
            return Err(config_err(format!(
                "kernel {kh}x{kw}x{in_channels}x{out_channels} needs {n} weights, got {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(config_err(format!(
                "kernel needs {out_channels} biases, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            kh,
            kw,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        kh: usize,
        kw: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut k = Self::zeros(kh, kw, in_channels, out_channels)?;
        let limit = (6.0 / (k.fan_in() + k.fan_out()) as f64).sqrt();
        for w in &mut k.weights {
            *w = T::from_f64(rng.gen_range(-limit..limit));
        }
        Ok(k)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.in_channels
    }

    pub fn fan_out(&self) -> usize {
        self.kh * self.kw * self.out_channels
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// Weights and bias borrowed mutably at once.
    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.weights, &mut self.bias)
    }

    #[inline]
    pub fn weight_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kw + kx) * self.in_channels + ci) * self.out_channels + co
    }

    pub fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> T {
        self.weights[self.weight_index(ky, kx, ci, co)]
    }

    pub fn set_weight(&mut self, ky: usize, kx: usize, ci: usize, co: usize, value: T) {
        let i = self.weight_index(ky, kx, ci, co);
        self.weights[i] = value;
    }

    /// Elementwise `self += other`; both kernels must have identical geometry.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(
            (self.kh, self.kw, self.in_channels, self.out_channels),
            (other.kh, other.kw, other.in_channels, other.out_channels),
            "kernel geometry mismatch"
        );
        for (a, &b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *v *= alpha;
        }
    }

    /// Copy of the kernel keeping only the listed input channels, in order.
    pub fn select_input_channels(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&c| c >= self.in_channels) {
            return Err(config_err(format!(
                "input channel {bad} out of range for a kernel with {} inputs",
                self.in_channels
            )));
        }
        let mut out = Self::zeros(self.kh, self.kw, keep.len(), self.out_channels)?;
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                for (new_ci, &ci) in keep.iter().enumerate() {
                    for co in 0..self.out_channels {
                        out.set_weight(ky, kx, new_ci, co, self.weight(ky, kx, ci, co));
                    }
                }
            }
        }
        out.bias.copy_from_slice(&self.bias);
        Ok(out)
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels != self.in_channels {
            return Err(config_err(format!(
                "conv2d: input has {} channels, kernel expects {}",
                shape.channels, self.in_channels
            )));
        }
        Ok(())
    }
}

fn check_dims(kh: usize, kw: usize, cin: usize, cout: usize) -> Result<usize> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(config_err(format!("kernel extent must be odd, got {kh}x{kw}")));
    }
    if cin == 0 || cout == 0 {
        return Err(config_err("kernel channel counts must be positive"));
    }
    Ok(kh * kw * cin * cout)
}

/// Unfold zero-padded patches: one row per output pixel, columns ordered
/// `(ky, kx, channel)` to match the weight layout.
fn im2col<T: Real>(x: &Tensor<T>, kh: usize, kw: usize) -> Vec<T> {
    let Shape {
        height: h,
        width: w,
        channels: c,
    } = x.shape();
    let (ph, pw) = (kh / 2, kw / 2);
    let row_len = kh * kw * c;
    let src = x.data();
    let mut cols = vec![T::zero(); h * w * row_len];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * row_len..][..row_len];
            for ky in 0..kh {
                let iy = y + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let dst = (ky * kw + kx) * c;
                    let s = (iy * w + ix) * c;
                    row[dst..dst + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
fn col2im<T: Real>(cols: &[T], shape: Shape, kh: usize, kw: usize) -> Tensor<T> {
    let Shape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let (ph, pw) = (kh / 2, kw / 2);
    let row_len = kh * kw * c;
    let mut out = Tensor::zeros(shape);
    let dst = out.data_mut();
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * row_len..][..row_len];
            for ky in 0..kh {
                let iy = y + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let s = (ky * kw + kx) * c;
                    let d = (iy * w + ix) * c;
                    for (o, &g) in dst[d..d + c].iter_mut().zip(&row[s..s + c]) {
                        *o += g;
                    }
                }
            }
        }
    }
    out
}

/// `rows · W + b` for `m` rows of length `kh·kw·C_in`. Shared by the
/// convolution and the fully-connected LSTM so both reach the same
/// floating-point result for equivalent inputs.
pub(crate) fn affine_rows<T: Real>(rows: &[T], m: usize, kernel: &ConvKernel<T>) -> Vec<T> {
    let k = kernel.fan_in();
    let n = kernel.out_channels;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, rows, (k, 1), &kernel.weights, (n, 1), T::zero(), &mut out, n);
    for row in out.chunks_exact_mut(n) {
        for (o, &b) in row.iter_mut().zip(&kernel.bias) {
            *o += b;
        }
    }
    out
}

/// Accumulates weight and bias gradients into `grads` and returns the
/// gradient with respect to `rows`.
pub(crate) fn affine_rows_backward<T: Real>(
    rows: &[T],
    m: usize,
    kernel: &ConvKernel<T>,
    grad_out: &[T],
    grads: &mut ConvKernel<T>,
) -> Vec<T> {
    let k = kernel.fan_in();
    let n = kernel.out_channels;
    for row in grad_out.chunks_exact(n) {
        for (b, &g) in grads.bias.iter_mut().zip(row) {
            *b += g;
        }
    }
    // dW += rowsᵀ · dY
    T::gemm(k, m, n, rows, (1, k), grad_out, (n, 1), T::one(), &mut grads.weights, n);
    // d_rows = dY · Wᵀ
    let mut d_rows = vec![T::zero(); m * k];
    T::gemm(m, n, k, grad_out, (n, 1), &kernel.weights, (1, n), T::zero(), &mut d_rows, k);
    d_rows
}

/// Same-padded, stride-1 cross-correlation plus bias.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    kernel.check_input(input.shape())?;
    let m = input.shape().pixels();
    let out = if kernel.kh == 1 && kernel.kw == 1 {
        affine_rows(input.data(), m, kernel)
    } else {
        let cols = im2col(input, kernel.kh, kernel.kw);
        affine_rows(&cols, m, kernel)
    };
    Tensor::from_vec(input.shape().with_channels(kernel.out_channels), out)
}

/// Exact gradients of [`conv2d`] with respect to its input, weights and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvKernel<T>)> {
    let mut grads = kernel.zeros_like();
    let grad_input = conv2d_backward_accumulate(input, kernel, grad_out, &mut grads)?;
    Ok((grad_input, grads))
}

/// Like [`conv2d_backward`] but adds the parameter gradients into `grads`,
/// which is how gradients of a kernel reused across time steps accumulate.
pub fn conv2d_backward_accumulate<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
    grads: &mut ConvKernel<T>,
) -> Result<Tensor<T>> {
    kernel.check_input(input.shape())?;
    let expected = input.shape().with_channels(kernel.out_channels);
    if grad_out.shape() != expected {
        return Err(config_err(format!(
            "conv2d_backward: cotangent shape {} does not match output shape {expected}",
            grad_out.shape()
        )));
    }
    let m = input.shape().pixels();
    if kernel.kh == 1 && kernel.kw == 1 {
        let d = affine_rows_backward(input.data(), m, kernel, grad_out.data(), grads);
        Tensor::from_vec(input.shape(), d)
    } else {
        let cols = im2col(input, kernel.kh, kernel.kw);
        let d_cols = affine_rows_backward(&cols, m, kernel, grad_out.data(), grads);
        Ok(col2im(&d_cols, input.shape(), kernel.kh, kernel.kw))
    }
}
