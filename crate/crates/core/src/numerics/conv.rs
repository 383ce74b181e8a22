//! Convolution block kernels: zero-padded k×k convolution, bias, ReLU.
//!
//! Activations are stored channel-last (`H×W×C`), weights as
//! `Cout×Cin×k×k`. Internally the weights are re-laid out as
//! `k×k×Cin×Cout`, which is the right-hand operand of the patch-matrix
//! product.

use super::{NumericsError, Tensor};

/// Geometry of one convolution call, validated against the tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn infer(
        input: &Tensor,
        weights: &Tensor,
        bias: &Tensor,
        stride: usize,
    ) -> Result<Self, NumericsError> {
        let &[height, width, in_channels] = input.shape() else {
            return Err(NumericsError::ShapeMismatch {
                context: "conv input must be H×W×C",
                expected: vec![0, 0, 0],
                got: input.shape().to_vec(),
            });
        };
        let &[out_channels, w_in, kh, kw] = weights.shape() else {
            return Err(NumericsError::ShapeMismatch {
                context: "conv weights must be Cout×Cin×k×k",
                expected: vec![0, in_channels, 0, 0],
                got: weights.shape().to_vec(),
            });
        };
        if w_in != in_channels {
            return Err(NumericsError::ShapeMismatch {
                context: "conv weight input channels",
                expected: vec![out_channels, in_channels, kh, kw],
                got: weights.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "conv kernel must be square with odd size, got {kh}×{kw}"
            )));
        }
        if bias.shape() != [out_channels] {
            return Err(NumericsError::ShapeMismatch {
                context: "conv bias",
                expected: vec![out_channels],
                got: bias.shape().to_vec(),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(NumericsError::InvalidArgument(format!(
                "conv stride must be 1 or 2, got {stride}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(NumericsError::InvalidArgument(
                "conv input has an empty spatial extent".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            in_channels,
            out_channels,
            kernel: kh,
            stride,
            out_height: height.div_ceil(stride),
            out_width: width.div_ceil(stride),
        })
    }

    /// Nominal multiply-add count (padding taps included).
    pub fn macs(&self) -> u64 {
        (self.out_height * self.out_width * self.out_channels * self.in_channels) as u64
            * (self.kernel * self.kernel) as u64
    }

    fn pad(&self) -> isize {
        (self.kernel as isize - 1) / 2
    }
}

/// `Cout×Cin×k×k` -> `k×k×Cin×Cout`.
fn to_tap_major(weights: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (co_n, ci_n, k) = (g.out_channels, g.in_channels, g.kernel);
    let mut out = vec![0.0; weights.len()];
    for co in 0..co_n {
        for ci in 0..ci_n {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ky * k + kx) * ci_n + ci) * co_n + co] =
                        weights[((co * ci_n + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

/// `k×k×Cin×Cout` -> `Cout×Cin×k×k`.
fn from_tap_major(taps: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (co_n, ci_n, k) = (g.out_channels, g.in_channels, g.kernel);
    let mut out = vec![0.0; taps.len()];
    for co in 0..co_n {
        for ci in 0..ci_n {
            for ky in 0..k {
                for kx in 0..k {
                    out[((co * ci_n + ci) * k + ky) * k + kx] =
                        taps[((ky * k + kx) * ci_n + ci) * co_n + co];
                }
            }
        }
    }
    out
}

/// Input coordinate for an output coordinate and tap, or `None` in the
/// zero padding.
#[inline]
fn source(o: usize, tap: usize, stride: usize, pad: isize, limit: usize) -> Option<usize> {
    let i = (o * stride) as isize + tap as isize - pad;
    (i >= 0 && (i as usize) < limit).then_some(i as usize)
}

/// Patch matrix with one row per output pixel and columns ordered
/// `(ky, kx, ci)`; padding taps are zero.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ci_n, k, pad) = (g.in_channels, g.kernel, g.pad());
    let cols = k * k * ci_n;
    let mut p = vec![0.0; g.out_height * g.out_width * cols];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            let row = &mut p[(oy * g.out_width + ox) * cols..][..cols];
            for ky in 0..k {
                let Some(iy) = source(oy, ky, g.stride, pad, g.height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = source(ox, kx, g.stride, pad, g.width) else {
                        continue;
                    };
                    row[(ky * k + kx) * ci_n..][..ci_n]
                        .copy_from_slice(&x[(iy * g.width + ix) * ci_n..][..ci_n]);
                }
            }
        }
    }
    p
}

/// Scatter-adds a patch-matrix gradient back onto the input.
fn col2im(dp: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ci_n, k, pad) = (g.in_channels, g.kernel, g.pad());
    let cols = k * k * ci_n;
    let mut dx = vec![0.0; g.height * g.width * ci_n];
    for oy in 0..g.out_height {
        for ox in 0..g.out_width {
            let row = &dp[(oy * g.out_width + ox) * cols..][..cols];
            for ky in 0..k {
                let Some(iy) = source(oy, ky, g.stride, pad, g.height) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = source(ox, kx, g.stride, pad, g.width) else {
                        continue;
                    };
                    let dst = &mut dx[(iy * g.width + ix) * ci_n..][..ci_n];
                    for (d, &v) in dst.iter_mut().zip(&row[(ky * k + kx) * ci_n..][..ci_n]) {
                        *d += v;
                    }
                }
            }
        }
    }
    dx
}

/// Row-major `c = a·b` (`op` transposes per flag) via `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major buffers, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Zero-padded convolution followed by bias and ReLU.
///
/// Output spatial size is `ceil(H/stride) × ceil(W/stride)`.
pub fn conv_block_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor, NumericsError> {
    let g = ConvGeometry::infer(input, weights, bias, stride)?;
    if !input.is_finite() {
        return Err(NumericsError::NonFinite {
            what: "conv input".into(),
        });
    }
    let taps = to_tap_major(weights.data(), &g);
    let patches = im2col(input.data(), &g);
    let (co_n, rows) = (g.out_channels, g.out_height * g.out_width);
    let cols = g.kernel * g.kernel * g.in_channels;
    let mut out = vec![0.0; rows * co_n];
    gemm(rows, cols, co_n, &patches, false, &taps, false, &mut out);
    for acc in out.chunks_exact_mut(co_n) {
        for (a, &b) in acc.iter_mut().zip(bias.data()) {
            *a = (*a + b).max(0.0);
        }
    }
    Tensor::new(vec![g.out_height, g.out_width, co_n], out)
}

/// Gradients produced by [`conv_block_backward`].
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv_block_forward`] given its forward `output`
/// (used as the ReLU mask) and the upstream gradient.
pub fn conv_block_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    output: &Tensor,
    grad_output: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads, NumericsError> {
    let g = ConvGeometry::infer(input, weights, bias, stride)?;
    let out_shape = [g.out_height, g.out_width, g.out_channels];
    if output.shape() != out_shape || grad_output.shape() != out_shape {
        return Err(NumericsError::ShapeMismatch {
            context: "conv backward upstream gradient",
            expected: out_shape.to_vec(),
            got: grad_output.shape().to_vec(),
        });
    }
    let (co_n, rows) = (g.out_channels, g.out_height * g.out_width);
    let cols = g.kernel * g.kernel * g.in_channels;

    let d_pre: Vec<f64> = output
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&y, &dy)| if y > 0.0 { dy } else { 0.0 })
        .collect();
    let mut d_bias = vec![0.0; co_n];
    for row in d_pre.chunks_exact(co_n) {
        for (db, &d) in d_bias.iter_mut().zip(row) {
            *db += d;
        }
    }

    let patches = im2col(input.data(), &g);
    let mut d_taps = vec![0.0; cols * co_n];
    gemm(cols, rows, co_n, &patches, true, &d_pre, false, &mut d_taps);

    let d_input = if need_input_grad {
        let taps = to_tap_major(weights.data(), &g);
        let mut dp = vec![0.0; rows * cols];
        gemm(rows, co_n, cols, &d_pre, false, &taps, true, &mut dp);
        Some(Tensor::new(input.shape().to_vec(), col2im(&dp, &g))?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: d_input,
        weights: Tensor::new(weights.shape().to_vec(), from_tap_major(&d_taps, &g))?,
        bias: Tensor::vector(d_bias),
    })
}
