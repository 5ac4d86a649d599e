//! Differentiable layer primitives with hand-written backward passes.
//!
//! Spatial tensors are `[B, C, H, W]` (a 3D `[C, H, W]` input is treated as a
//! batch of one). Temporal tensors are `[C, T]`, channel-major.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{matmul, Scalar, Tensor};

/// Temporal direction of a dilated convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causality {
    /// Taps at `t-d, t, t+d`.
    NonCausal,
    /// Taps at `t-2d, t-d, t`.
    Causal,
}

impl Causality {
    /// Input offset read by kernel tap `j` of a size-`kernel` filter.
    pub fn tap_offset(self, j: usize, kernel: usize, dilation: usize) -> isize {
        let (j, kernel, d) = (j as isize, kernel as isize, dilation as isize);
        match self {
            Causality::NonCausal => (j - (kernel - 1) / 2) * d,
            Causality::Causal => (j - (kernel - 1)) * d,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv2dGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeom {
    fn new(input: &[usize], weight: &[usize], bias: Option<&[usize]>, stride: usize) -> Result<Self> {
        let (batch, cin, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::Shape(format!("conv2d input must be 3D or 4D, got {input:?}"))),
        };
        let [cout, wcin, kh, kw] = *weight else {
            return Err(Error::Shape(format!("conv2d weight must be 4D, got {weight:?}")));
        };
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if let Some(b) = bias {
            if b != [cout] {
                return Err(Error::Shape(format!("conv2d bias must be [{cout}], got {b:?}")));
            }
        }
        let pad = kh / 2;
        Ok(Conv2dGeom {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
        })
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_shape(&self, input_rank: usize) -> Vec<usize> {
        if input_rank == 3 {
            vec![self.cout, self.oh, self.ow]
        } else {
            vec![self.batch, self.cout, self.oh, self.ow]
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeom) -> Vec<T> {
    let p = g.positions();
    let ncols = g.batch * p;
    let mut cols = vec![T::zero(); g.patch() * ncols];
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[b * p + oy * g.ow..][..g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom) -> Vec<T> {
    let p = g.positions();
    let ncols = g.batch * p;
    let mut dx = vec![T::zero(); g.batch * g.cin * g.h * g.w];
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..][..g.w];
                        let srow = &src[b * p + oy * g.ow..][..g.ow];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2D convolution with odd square kernels, zero padding `k/2` and stride 1 or 2.
///
/// Output spatial size is `ceil(H/stride) x ceil(W/stride)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = Conv2dGeom::new(input.shape(), weight.shape(), Some(bias.shape()), stride)?;
    let cols = im2col(input.data(), &g);
    let p = g.positions();
    let ncols = g.batch * p;
    let mut tmp = vec![T::zero(); g.cout * ncols];
    matmul(g.cout, g.patch(), ncols, weight.data(), false, &cols, false, &mut tmp, false);
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let bv = bias.data()[co];
            let src = &tmp[co * ncols + b * p..][..p];
            let dst = &mut out[(b * g.cout + co) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    Tensor::from_vec(&g.out_shape(input.rank()), out)
}

pub struct Conv2dGrads<T> {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    need_input_grad: bool,
) -> Result<Conv2dGrads<T>> {
    let g = Conv2dGeom::new(input.shape(), weight.shape(), None, stride)?;
    if grad_out.shape() != g.out_shape(input.rank()).as_slice() {
        return Err(Error::Shape(format!(
            "conv2d grad_out {:?} does not match output {:?}",
            grad_out.shape(),
            g.out_shape(input.rank())
        )));
    }
    let p = g.positions();
    let ncols = g.batch * p;
    // [Cout, B*P] view of the output gradient.
    let mut g2 = vec![T::zero(); g.cout * ncols];
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let src = &grad_out.data()[(b * g.cout + co) * p..][..p];
            g2[co * ncols + b * p..][..p].copy_from_slice(src);
            gb[co] += src.iter().copied().sum::<T>();
        }
    }
    let cols = im2col(input.data(), &g);
    let mut gw = vec![T::zero(); g.cout * g.patch()];
    matmul(g.cout, ncols, g.patch(), &g2, false, &cols, true, &mut gw, false);
    let input_grad = if need_input_grad {
        let mut gcols = vec![T::zero(); g.patch() * ncols];
        matmul(g.patch(), g.cout, ncols, weight.data(), true, &g2, false, &mut gcols, false);
        Some(Tensor::from_vec(input.shape(), col2im(&gcols, &g))?)
    } else {
        None
    };
    Ok(Conv2dGrads {
        input: input_grad,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[g.cout], gb)?,
    })
}

fn conv1d_check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize)> {
    let [cin, t] = *input.shape() else {
        return Err(Error::Shape(format!("conv1d input must be [C, T], got {:?}", input.shape())));
    };
    let [cout, wcin, k] = *weight.shape() else {
        return Err(Error::Shape(format!(
            "conv1d weight must be [Cout, Cin, K], got {:?}",
            weight.shape()
        )));
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv1d weight expects {wcin} input channels, input has {cin}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Shape(format!("conv1d kernel must be odd, got {k}")));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    Ok((cin, t, cout, k))
}

fn temporal_cols<T: Scalar>(x: &[T], cin: usize, t: usize, k: usize, dilation: usize, mode: Causality) -> Vec<T> {
    let mut cols = vec![T::zero(); cin * k * t];
    for ci in 0..cin {
        let src = &x[ci * t..(ci + 1) * t];
        for j in 0..k {
            let off = mode.tap_offset(j, k, dilation);
            let dst = &mut cols[(ci * k + j) * t..][..t];
            for (tt, d) in dst.iter_mut().enumerate() {
                let s = tt as isize + off;
                if s >= 0 && s < t as isize {
                    *d = src[s as usize];
                }
            }
        }
    }
    cols
}

/// Dilated 1D convolution over `[Cin, T]` with zero padding; length is preserved.
pub fn conv1d_dilated<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
    mode: Causality,
) -> Result<Tensor<T>> {
    let (cin, t, cout, k) = conv1d_check(input, weight, dilation)?;
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!("conv1d bias must be [{cout}], got {:?}", bias.shape())));
    }
    let cols = temporal_cols(input.data(), cin, t, k, dilation, mode);
    let mut out = vec![T::zero(); cout * t];
    matmul(cout, cin * k, t, weight.data(), false, &cols, false, &mut out, false);
    add_row_bias(&mut out, bias.data(), t);
    Tensor::from_vec(&[cout, t], out)
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv1d_dilated_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    dilation: usize,
    mode: Causality,
) -> Result<ConvGrads<T>> {
    let (cin, t, cout, k) = conv1d_check(input, weight, dilation)?;
    if grad_out.shape() != [cout, t] {
        return Err(Error::Shape(format!(
            "conv1d grad_out must be [{cout}, {t}], got {:?}",
            grad_out.shape()
        )));
    }
    let cols = temporal_cols(input.data(), cin, t, k, dilation, mode);
    let mut gw = vec![T::zero(); cout * cin * k];
    matmul(cout, t, cin * k, grad_out.data(), false, &cols, true, &mut gw, false);
    let gb = row_sums(grad_out.data(), t);
    let mut gcols = vec![T::zero(); cin * k * t];
    matmul(cin * k, cout, t, weight.data(), true, grad_out.data(), false, &mut gcols, false);
    let mut gx = vec![T::zero(); cin * t];
    for ci in 0..cin {
        for j in 0..k {
            let off = mode.tap_offset(j, k, dilation);
            let src = &gcols[(ci * k + j) * t..][..t];
            let dst = &mut gx[ci * t..(ci + 1) * t];
            for (tt, &s) in src.iter().enumerate() {
                let idx = tt as isize + off;
                if idx >= 0 && idx < t as isize {
                    dst[idx as usize] += s;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(&[cin, t], gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[cout], gb)?,
    })
}

fn conv1x1_check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [cin, t] = *input.shape() else {
        return Err(Error::Shape(format!("conv1x1 input must be [C, T], got {:?}", input.shape())));
    };
    let [cout, wcin] = *weight.shape() else {
        return Err(Error::Shape(format!("conv1x1 weight must be [Cout, Cin], got {:?}", weight.shape())));
    };
    if wcin != cin {
        return Err(Error::Shape(format!(
            "conv1x1 weight expects {wcin} input channels, input has {cin}"
        )));
    }
    Ok((cin, t, cout))
}

/// Pointwise (1x1) temporal convolution: `W x + b` at every time step.
pub fn conv1x1<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (cin, t, cout) = conv1x1_check(input, weight)?;
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!("conv1x1 bias must be [{cout}], got {:?}", bias.shape())));
    }
    let mut out = vec![T::zero(); cout * t];
    matmul(cout, cin, t, weight.data(), false, input.data(), false, &mut out, false);
    add_row_bias(&mut out, bias.data(), t);
    Tensor::from_vec(&[cout, t], out)
}

pub fn conv1x1_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (cin, t, cout) = conv1x1_check(input, weight)?;
    if grad_out.shape() != [cout, t] {
        return Err(Error::Shape(format!(
            "conv1x1 grad_out must be [{cout}, {t}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut gw = vec![T::zero(); cout * cin];
    matmul(cout, t, cin, grad_out.data(), false, input.data(), true, &mut gw, false);
    let mut gx = vec![T::zero(); cin * t];
    matmul(cin, cout, t, weight.data(), true, grad_out.data(), false, &mut gx, false);
    Ok(ConvGrads {
        input: Tensor::from_vec(&[cin, t], gx)?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[cout], row_sums(grad_out.data(), t))?,
    })
}

fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T], cols: usize) {
    for (row, &b) in out.chunks_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn row_sums<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    x.chunks(cols).map(|r| r.iter().copied().sum()).collect()
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its *input*.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    assert_eq!(input.shape(), grad_out.shape());
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`, `[C, H, W] -> [C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (shape, hw) = match *x.shape() {
        [c, h, w] => (vec![c], h * w),
        [b, c, h, w] => (vec![b, c], h * w),
        _ => return Err(Error::Shape(format!("global_avg_pool needs 3D/4D input, got {:?}", x.shape()))),
    };
    let scale = T::one() / T::of(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|c| c.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let hw: usize = input_shape[input_shape.len() - 2..].iter().product();
    let expected: usize = input_shape[..input_shape.len() - 2].iter().product();
    if grad_out.len() != expected {
        return Err(Error::Shape(format!(
            "global_avg_pool grad_out has {} values, expected {expected}",
            grad_out.len()
        )));
    }
    let scale = T::one() / T::of(hw as f64);
    let mut data = Vec::with_capacity(expected * hw);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, hw));
    }
    Tensor::from_vec(input_shape, data)
}

fn last_axis(x: &Tensor<impl Scalar>) -> usize {
    *x.shape().last().expect("non-empty shape")
}

/// Softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = last_axis(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Gradient of softmax given its *output*.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let n = last_axis(output);
    let mut gx = grad_out.clone();
    for (g, y) in gx.data_mut().chunks_mut(n).zip(output.data().chunks(n)) {
        let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
        for (gi, &yi) in g.iter_mut().zip(y) {
            *gi = yi * (*gi - dot);
        }
    }
    gx
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = last_axis(x);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Gradient of log-softmax given its *output*.
pub fn log_softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let n = last_axis(output);
    let mut gx = grad_out.clone();
    for (g, y) in gx.data_mut().chunks_mut(n).zip(output.data().chunks(n)) {
        let s: T = g.iter().copied().sum();
        for (gi, &yi) in g.iter_mut().zip(y) {
            *gi -= yi.exp() * s;
        }
    }
    gx
}

/// Bilinear resize of a single-channel image with half-pixel centres.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let axis = |o: usize, scale: f64, n: usize| -> (usize, usize, f32) {
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, sy, h);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}
