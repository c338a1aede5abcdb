use super::{matmul, Real, Tensor};
use crate::{Error, Result};

/// Static shape description of a 2-D convolution over `[C, H, W]` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::config("conv2d channels and kernel extents must be positive"));
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(Error::config(format!(
                "conv2d kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        Ok(Conv2dGeometry {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    /// Rows of the unfolded patch matrix: `C_in * kH * kW`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    /// Output columns `[x0, x1)` whose input column for kernel offset `kj`
    /// falls inside the image.
    fn valid_x(&self, kj: usize) -> (usize, usize) {
        let pad = self.padding;
        let ow = self.out_w();
        // ix = x * stride + kj - pad must lie in [0, in_w).
        let x0 = if kj >= pad { 0 } else { (pad - kj).div_ceil(self.stride) };
        let x1 = if self.in_w + pad > kj {
            ((self.in_w + pad - kj - 1) / self.stride + 1).min(ow)
        } else {
            0
        };
        (x0.min(x1), x1)
    }

    /// Unfolds a batch of images into a `[patch_len, batch * H' * W']` matrix.
    pub(crate) fn im2col<T: Real>(&self, input: &[T], batch: usize) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let positions = oh * ow;
        let cols_w = batch * positions;
        let mut cols = vec![T::zero(); self.patch_len() * cols_w];
        let pad = self.padding as isize;
        for b in 0..batch {
            let img = &input[b * self.input_len()..(b + 1) * self.input_len()];
            for c in 0..self.in_channels {
                let plane = &img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ki in 0..self.kernel_h {
                    for kj in 0..self.kernel_w {
                        let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                        let dst = &mut cols[row * cols_w + b * positions..][..positions];
                        let (x0, x1) = self.valid_x(kj);
                        let first = (x0 * self.stride + kj).saturating_sub(self.padding);
                        for y in 0..oh {
                            let iy = (y * self.stride + ki) as isize - pad;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * self.in_w..][..self.in_w];
                            let out = &mut dst[y * ow + x0..y * ow + x1];
                            if self.stride == 1 {
                                out.copy_from_slice(&src_row[first..first + out.len()]);
                            } else {
                                for (i, d) in out.iter_mut().enumerate() {
                                    *d = src_row[first + i * self.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back
    /// onto the input images.
    pub(crate) fn col2im<T: Real>(&self, cols: &[T], batch: usize) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let positions = oh * ow;
        let cols_w = batch * positions;
        let mut out = vec![T::zero(); batch * self.input_len()];
        let pad = self.padding as isize;
        for b in 0..batch {
            let img = &mut out[b * self.input_len()..(b + 1) * self.input_len()];
            for c in 0..self.in_channels {
                let plane = &mut img[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ki in 0..self.kernel_h {
                    for kj in 0..self.kernel_w {
                        let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                        let src = &cols[row * cols_w + b * positions..][..positions];
                        let (x0, x1) = self.valid_x(kj);
                        let first = (x0 * self.stride + kj).saturating_sub(self.padding);
                        for y in 0..oh {
                            let iy = (y * self.stride + ki) as isize - pad;
                            if iy < 0 || iy >= self.in_h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * self.in_w..][..self.in_w];
                            for (i, &v) in src[y * ow + x0..y * ow + x1].iter().enumerate() {
                                dst_row[first + i * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Batched forward pass. Returns `[batch, C_out, H', W']` and the unfolded
    /// input, which the backward pass needs.
    pub(crate) fn forward_batch<T: Real>(
        &self,
        input: &[T],
        batch: usize,
        kernel: &[T],
        bias: Option<&[T]>,
    ) -> (Vec<T>, Vec<T>) {
        debug_assert_eq!(input.len(), batch * self.input_len());
        debug_assert_eq!(kernel.len(), self.kernel_len());
        let positions = self.out_h() * self.out_w();
        let cols = self.im2col(input, batch);
        let cols_w = batch * positions;
        let mut channel_major = vec![T::zero(); self.out_channels * cols_w];
        matmul(
            self.out_channels,
            self.patch_len(),
            cols_w,
            kernel,
            false,
            &cols,
            false,
            &mut channel_major,
            false,
        );
        let mut out = vec![T::zero(); batch * self.output_len()];
        for b in 0..batch {
            for o in 0..self.out_channels {
                let src = &channel_major[o * cols_w + b * positions..][..positions];
                let dst = &mut out[(b * self.out_channels + o) * positions..][..positions];
                let shift = bias.map_or(T::zero(), |bias| bias[o]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
        (out, cols)
    }

    /// Batched backward pass. Accumulates into `grad_kernel` / `grad_bias` and
    /// returns the gradient with respect to the input when requested.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_batch<T: Real>(
        &self,
        cols: &[T],
        batch: usize,
        kernel: &[T],
        grad_out: &[T],
        grad_kernel: &mut [T],
        grad_bias: Option<&mut [T]>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let positions = self.out_h() * self.out_w();
        let cols_w = batch * positions;
        let mut g = vec![T::zero(); self.out_channels * cols_w];
        for b in 0..batch {
            for o in 0..self.out_channels {
                let src = &grad_out[(b * self.out_channels + o) * positions..][..positions];
                g[o * cols_w + b * positions..][..positions].copy_from_slice(src);
            }
        }
        if let Some(gb) = grad_bias {
            for (o, gb) in gb.iter_mut().enumerate() {
                *gb += g[o * cols_w..(o + 1) * cols_w].iter().copied().sum::<T>();
            }
        }
        matmul(
            self.out_channels,
            cols_w,
            self.patch_len(),
            &g,
            false,
            cols,
            true,
            grad_kernel,
            true,
        );
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); self.patch_len() * cols_w];
        matmul(
            self.patch_len(),
            self.out_channels,
            cols_w,
            kernel,
            true,
            &g,
            false,
            &mut dcols,
            false,
        );
        Some(self.col2im(&dcols, batch))
    }
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGeometry> {
    let (&[c, h, w], &[co, ci, kh, kw]) = (input.shape(), kernel.shape()) else {
        return Err(Error::config(format!(
            "conv2d expects input [C,H,W] and kernel [C_out,C_in,kH,kW], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    };
    if c != ci {
        return Err(Error::config(format!(
            "conv2d input has {c} channels but kernel expects {ci}"
        )));
    }
    Conv2dGeometry::new(c, h, w, co, kh, kw, stride, padding)
}

/// Cross-correlation of a single `[C_in, H, W]` image with a
/// `[C_out, C_in, kH, kW]` kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geom = conv_geometry(input, kernel, stride, padding)?;
    let (out, _) = geom.forward_batch(input.data(), 1, kernel.data(), None);
    Tensor::from_vec(&[geom.out_channels, geom.out_h(), geom.out_w()], out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geom = conv_geometry(input, kernel, stride, padding)?;
    if grad_out.shape() != [geom.out_channels, geom.out_h(), geom.out_w()] {
        return Err(Error::config(format!(
            "conv2d output gradient has shape {:?}",
            grad_out.shape()
        )));
    }
    let cols = geom.im2col(input.data(), 1);
    let mut gk = vec![T::zero(); geom.kernel_len()];
    let gi = geom
        .backward_batch(&cols, 1, kernel.data(), grad_out.data(), &mut gk, None, true)
        .expect("input gradient requested");
    Ok((
        Tensor::from_vec(input.shape(), gi)?,
        Tensor::from_vec(kernel.shape(), gk)?,
    ))
}

/// `weight * input + bias` for one vector.
pub fn linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d_out, d_in) = linear_dims(input, weight, bias)?;
    let mut out = bias.data().to_vec();
    matmul(d_out, d_in, 1, weight.data(), false, input.data(), false, &mut out, true);
    Tensor::from_vec(&[d_out], out)
}

/// Returns `(d_input, d_weight, d_bias)` for [`linear`].
pub fn linear_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let bias_like = Tensor::zeros(&[weight.shape().first().copied().unwrap_or(0)]);
    let (d_out, d_in) = linear_dims(input, weight, &bias_like)?;
    if grad_out.len() != d_out {
        return Err(Error::config("linear output gradient has wrong length"));
    }
    let mut d_input = vec![T::zero(); d_in];
    matmul(1, d_out, d_in, grad_out.data(), false, weight.data(), false, &mut d_input, false);
    let mut d_weight = vec![T::zero(); d_out * d_in];
    matmul(d_out, 1, d_in, grad_out.data(), false, input.data(), false, &mut d_weight, false);
    Ok((
        Tensor::from_vec(&[d_in], d_input)?,
        Tensor::from_vec(&[d_out, d_in], d_weight)?,
        Tensor::from_vec(&[d_out], grad_out.data().to_vec())?,
    ))
}

fn linear_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    let &[d_out, d_in] = weight.shape() else {
        return Err(Error::config(format!(
            "linear weight must be 2-D, got {:?}",
            weight.shape()
        )));
    };
    if input.len() != d_in || bias.len() != d_out {
        return Err(Error::config(format!(
            "linear dimension mismatch: weight {d_out}x{d_in}, input {}, bias {}",
            input.len(),
            bias.len()
        )));
    }
    Ok((d_out, d_in))
}

/// Bilinear score `a^T W b`.
pub fn bilinear_score<T: Real>(a: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    bilinear_dims(a, w, b)?;
    let mut wb = vec![T::zero(); a.len()];
    matmul(a.len(), b.len(), 1, w.data(), false, b.data(), false, &mut wb, false);
    Ok(a.data().iter().zip(&wb).map(|(&x, &y)| x * y).sum())
}

/// Returns `(d_a, d_W, d_b)` for [`bilinear_score`] scaled by `grad_score`.
pub fn bilinear_score_backward<T: Real>(
    a: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_score: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    bilinear_dims(a, w, b)?;
    let (da_len, db_len) = (a.len(), b.len());
    let mut wb = vec![T::zero(); da_len];
    matmul(da_len, db_len, 1, w.data(), false, b.data(), false, &mut wb, false);
    let mut wta = vec![T::zero(); db_len];
    matmul(1, da_len, db_len, a.data(), false, w.data(), false, &mut wta, false);
    let mut dw = vec![T::zero(); da_len * db_len];
    for i in 0..da_len {
        for j in 0..db_len {
            dw[i * db_len + j] = grad_score * a.data()[i] * b.data()[j];
        }
    }
    Ok((
        Tensor::from_vec(&[da_len], wb.into_iter().map(|v| v * grad_score).collect())?,
        Tensor::from_vec(&[da_len, db_len], dw)?,
        Tensor::from_vec(&[db_len], wta.into_iter().map(|v| v * grad_score).collect())?,
    ))
}

fn bilinear_dims<T: Real>(a: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if w.shape() != [a.len(), b.len()] {
        return Err(Error::config(format!(
            "bilinear weight {:?} does not match a[{}], b[{}]",
            w.shape(),
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `-logits[target] + log sum_j exp(logits[j])`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], target: usize) -> Result<T> {
    check_target(logits.len(), target)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&l| (l - max).exp()).sum();
    Ok(max + sum.ln() - logits[target])
}

/// Cross-entropy loss and its gradient `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy_with_grad<T: Real>(
    logits: &[T],
    target: usize,
) -> Result<(T, Vec<T>)> {
    check_target(logits.len(), target)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut grad: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = grad.iter().copied().sum();
    let loss = max + sum.ln() - logits[target];
    let inv = T::one() / sum;
    grad.iter_mut().for_each(|g| *g *= inv);
    grad[target] -= T::one();
    Ok((loss, grad))
}

fn check_target(n: usize, target: usize) -> Result<()> {
    if target >= n {
        return Err(Error::config(format!(
            "cross-entropy target {target} out of range for {n} logits"
        )));
    }
    Ok(())
}

pub fn relu_in_place<T: Real>(values: &mut [T]) {
    for v in values {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose ReLU output was not positive.
pub fn relu_backward_in_place<T: Real>(grad: &mut [T], activated: &[T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}
