//! Grouped 2-D convolution via im2col and a double-precision GEMM.
//!
//! Products are accumulated in `f64` and rounded to `f32` once per output
//! element, so results do not depend on how the channel reduction is split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, pad: 0, groups: 1, has_bias: true }
    }

    pub const fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub const fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub const fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub const fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self;
        if s.in_channels == 0 || s.out_channels == 0 {
            return Err(Error::Config(format!("conv with zero channels: {s:?}")));
        }
        if s.groups == 0 || !s.in_channels.is_multiple_of(s.groups) || !s.out_channels.is_multiple_of(s.groups) {
            return Err(Error::Config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                s.groups, s.in_channels, s.out_channels
            )));
        }
        if !matches!(s.kernel, 1 | 3) {
            return Err(Error::Config(format!("kernel {} not in {{1, 3}}", s.kernel)));
        }
        if s.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        Ok(())
    }

    pub const fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub const fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// `(out_channels, in_channels / groups, K, K)`.
    pub const fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.out_channels, self.in_per_group(), self.kernel, self.kernel)
    }

    /// `Cin · Cout · K² / g`.
    pub const fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    pub const fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |x: usize| -> Result<usize> {
            let padded = x + 2 * self.pad;
            if padded < self.kernel {
                return Err(Error::ShapeMismatch(format!("kernel {} larger than padded input {padded}", self.kernel)));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::ShapeMismatch(format!("conv expects {} input channels, got {input}", self.in_channels)));
        }
        let (h, w) = self.output_hw(input.h, input.w)?;
        Ok(Shape4::new(input.n, self.out_channels, h, w))
    }

    fn check_params(&self, weights: &Tensor, bias: &[f32]) -> Result<()> {
        if weights.shape() != self.weight_shape() {
            return Err(Error::ShapeMismatch(format!(
                "conv weights {} but spec needs {}",
                weights.shape(),
                self.weight_shape()
            )));
        }
        let want = if self.has_bias { self.out_channels } else { 0 };
        if bias.len() != want {
            return Err(Error::ShapeMismatch(format!("conv bias has {} values, expected {want}", bias.len())));
        }
        Ok(())
    }
}

struct Geometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, input: Shape4, output: Shape4) -> Self {
        Self {
            in_h: input.h,
            in_w: input.w,
            out_h: output.h,
            out_w: output.w,
            k: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t).checked_sub(self.pad)?;
        (p < extent).then_some(p)
    }

    /// Writes `channels × K² × (out_h·out_w)` rows starting at `input`.
    fn im2col(&self, input: &[f32], channels: usize, col: &mut [f64]) {
        let cols = self.cols();
        let plane = self.in_h * self.in_w;
        for c in 0..channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src(oy, ky, self.in_h) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.in_w) {
                                        Some(ix) => src[iy * self.in_w + ix] as f64,
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], channels: usize, out: &mut [f64]) {
        let cols = self.cols();
        let plane = self.in_h * self.in_w;
        for c in 0..channels {
            let dst = &mut out[c * plane..(c + 1) * plane];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ky, self.in_h) else { continue };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.src(ox, kx, self.in_w) {
                                dst[iy * self.in_w + ix] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe the dense layouts of a, b, c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn row_major(cols: usize) -> (isize, isize) {
    (cols as isize, 1)
}

fn transposed(cols_of_stored: usize) -> (isize, isize) {
    (1, cols_of_stored as isize)
}

pub fn conv2d(x: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    spec.check_params(weights, bias)?;
    conv2d_slices(x, spec, weights.data(), bias)
}

/// [`conv2d`] with the weights as a flat `(out, in/groups, K, K)` slice.
pub fn conv2d_slices(x: &Tensor, spec: &ConvSpec, weights: &[f32], bias: &[f32]) -> Result<Tensor> {
    let mut out = Vec::new();
    let out_shape = conv_accumulate(x, spec, weights, bias, |acc| out.extend(acc.iter().map(|&v| v as f32)))?;
    Ok(Tensor::from_parts(out_shape, out))
}

/// Convolution output before the final rounding to `f32`.
pub(crate) fn conv2d_f64(x: &Tensor, spec: &ConvSpec, weights: &[f32], bias: &[f32]) -> Result<(Shape4, Vec<f64>)> {
    let mut out = Vec::new();
    let shape = conv_accumulate(x, spec, weights, bias, |acc| out.extend_from_slice(acc))?;
    Ok((shape, out))
}

/// Runs the convolution and hands each `(image, group)` block of `f64`
/// accumulators to `emit` in output order.
fn conv_accumulate(
    x: &Tensor,
    spec: &ConvSpec,
    weights: &[f32],
    bias: &[f32],
    mut emit: impl FnMut(&[f64]),
) -> Result<Shape4> {
    let out_shape = spec.output_shape(x.shape())?;
    if weights.len() != spec.weight_count() {
        return Err(Error::ShapeMismatch(format!(
            "conv weights have {} values, spec needs {}",
            weights.len(),
            spec.weight_count()
        )));
    }
    let want = if spec.has_bias { spec.out_channels } else { 0 };
    if bias.len() != want {
        return Err(Error::ShapeMismatch(format!("conv bias has {} values, expected {want}", bias.len())));
    }
    let geo = Geometry::new(spec, x.shape(), out_shape);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let kk = cin_g * spec.kernel * spec.kernel;
    let cols = geo.cols();
    let in_plane = x.shape().plane();

    let w64: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let mut col = vec![0.0f64; kk * cols];
    let mut acc = vec![0.0f64; cout_g * cols];

    for n in 0..x.shape().n {
        for g in 0..spec.groups {
            let in_start = (n * spec.in_channels + g * cin_g) * in_plane;
            geo.im2col(&x.data()[in_start..in_start + cin_g * in_plane], cin_g, &mut col);
            for (co, row) in acc.chunks_exact_mut(cols).enumerate() {
                let b = if spec.has_bias { bias[g * cout_g + co] as f64 } else { 0.0 };
                row.fill(b);
            }
            let w = &w64[g * cout_g * kk..(g + 1) * cout_g * kk];
            gemm(cout_g, kk, cols, w, row_major(kk), &col, row_major(cols), 1.0, &mut acc);
            emit(&acc);
        }
    }
    Ok(out_shape)
}

pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_w: Tensor,
    pub grad_b: Vec<f32>,
}

/// Gradients of `Σ grad_out ⊙ conv2d(x)` with respect to input, weights and bias.
pub fn conv2d_backward(grad_out: &Tensor, x: &Tensor, spec: &ConvSpec, weights: &Tensor) -> Result<ConvGrads> {
    let out_shape = spec.output_shape(x.shape())?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!("grad_out {} but forward output is {out_shape}", grad_out.shape())));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {} but spec needs {}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    let geo = Geometry::new(spec, x.shape(), out_shape);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let kk = cin_g * spec.kernel * spec.kernel;
    let cols = geo.cols();
    let in_plane = x.shape().plane();

    let w64: Vec<f64> = weights.data().iter().map(|&v| v as f64).collect();
    let mut gw = vec![0.0f64; spec.weight_count()];
    let mut gb = vec![0.0f64; spec.out_channels];
    let mut gx = vec![0.0f64; x.len()];
    let mut col = vec![0.0f64; kk * cols];
    let mut gcol = vec![0.0f64; kk * cols];

    for n in 0..x.shape().n {
        for g in 0..spec.groups {
            let in_start = (n * spec.in_channels + g * cin_g) * in_plane;
            let out_start = (n * spec.out_channels + g * cout_g) * cols;
            let go: Vec<f64> =
                grad_out.data()[out_start..out_start + cout_g * cols].iter().map(|&v| v as f64).collect();
            for (co, row) in go.chunks_exact(cols).enumerate() {
                gb[g * cout_g + co] += row.iter().sum::<f64>();
            }
            geo.im2col(&x.data()[in_start..in_start + cin_g * in_plane], cin_g, &mut col);
            // dW += G · colᵀ
            let gw_block = &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk];
            gemm(cout_g, cols, kk, &go, row_major(cols), &col, transposed(cols), 1.0, gw_block);
            // dcol = Wᵀ · G
            let w = &w64[g * cout_g * kk..(g + 1) * cout_g * kk];
            gemm(kk, cout_g, cols, w, transposed(kk), &go, row_major(cols), 0.0, &mut gcol);
            geo.col2im(&gcol, cin_g, &mut gx[in_start..in_start + cin_g * in_plane]);
        }
    }

    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Ok(ConvGrads {
        grad_x: Tensor::from_parts(x.shape(), to32(gx)),
        grad_w: Tensor::from_parts(spec.weight_shape(), to32(gw)),
        grad_b: if spec.has_bias { to32(gb) } else { Vec::new() },
    })
}
