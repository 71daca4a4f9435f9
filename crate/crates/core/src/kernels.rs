//! Forward and backward kernels on plain tensors.
//!
//! Every kernel computes each output element with a fixed accumulation
//! order, so results do not depend on how rayon splits the work.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Stride, padding and grouping of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeom {
            stride,
            padding,
            groups,
        }
    }

    /// Stride-1, unpadded, dense.
    pub const fn pointwise() -> Self {
        ConvGeom::new(1, 0, 1)
    }

    /// "Same" padding for an odd kernel.
    pub const fn same(k: usize, stride: usize, groups: usize) -> Self {
        ConvGeom::new(stride, k / 2, groups)
    }
}

/// Weight, optional bias and geometry of one convolution.
#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub geom: ConvGeom,
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Validates the pairing of input and weight; returns the output shape.
pub fn conv_output_shape(
    x: Shape,
    w: Shape,
    bias_len: Option<usize>,
    g: ConvGeom,
) -> Result<Shape> {
    let [n, c_in, h, wd] = x.0;
    let [c_out, cin_g, kh, kw] = w.0;
    if g.groups == 0 || g.stride == 0 {
        return Err(Error::invalid("conv2d: stride and groups must be positive"));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", "kernel width", kh, kw));
    }
    if c_in % g.groups != 0 {
        return Err(Error::shape("conv2d", "input channels (groups)", g.groups, c_in));
    }
    if c_out % g.groups != 0 {
        return Err(Error::shape("conv2d", "output channels (groups)", g.groups, c_out));
    }
    if cin_g * g.groups != c_in {
        return Err(Error::shape("conv2d", "input channels", cin_g * g.groups, c_in));
    }
    if let Some(b) = bias_len {
        if b != c_out {
            return Err(Error::shape("conv2d", "bias length", c_out, b));
        }
    }
    let oh = conv_out_len(h, kh, g.stride, g.padding)
        .ok_or_else(|| Error::shape("conv2d", "height", kh, h + 2 * g.padding))?;
    let ow = conv_out_len(wd, kw, g.stride, g.padding)
        .ok_or_else(|| Error::shape("conv2d", "width", kw, wd + 2 * g.padding))?;
    Ok(Shape::new(n, c_out, oh, ow))
}

/// Output columns `[lo, hi)` whose input column `ow*s + kw - p` is inside `[0, w)`.
#[inline]
fn valid_range(w: usize, out_w: usize, kw: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if p > kw { (p - kw).div_ceil(s) } else { 0 };
    let last = w as isize - 1 + p as isize - kw as isize;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / s + 1).min(out_w);
    (lo.min(hi), hi)
}

/// `out[oh, ow] += wv * inp[oh*s + kh - p, ow*s + kw - p]` over the valid region.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap<T: Scalar>(
    out: &mut [T],
    inp: &[T],
    wv: T,
    (h, w): (usize, usize),
    (oh_n, ow_n): (usize, usize),
    (kh, kw): (usize, usize),
    s: usize,
    p: usize,
) {
    let (lo, hi) = valid_range(w, ow_n, kw, s, p);
    if lo >= hi {
        return;
    }
    for oh in 0..oh_n {
        let ih = (oh * s + kh) as isize - p as isize;
        if ih < 0 || ih as usize >= h {
            continue;
        }
        let in_row = &inp[ih as usize * w..(ih as usize + 1) * w];
        let out_row = &mut out[oh * ow_n + lo..oh * ow_n + hi];
        let iw0 = lo * s + kw - p;
        if s == 1 {
            for (o, &i) in out_row.iter_mut().zip(&in_row[iw0..iw0 + (hi - lo)]) {
                *o += wv * i;
            }
        } else {
            for (j, o) in out_row.iter_mut().enumerate() {
                *o += wv * in_row[iw0 + j * s];
            }
        }
    }
}

/// 1×1, stride 1, unpadded: every tap covers the whole plane, so the row
/// loops collapse into one pass with the same per-element order.
#[inline]
fn is_pointwise(k: usize, g: ConvGeom) -> bool {
    k == 1 && g.stride == 1 && g.padding == 0
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], inp: &[T], a: T) {
    for (o, &i) in out.iter_mut().zip(inp) {
        *o += a * i;
    }
}

/// Transposed tap: `gin[oh*s + kh - p, ow*s + kw - p] += wv * gout[oh, ow]`.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_tap<T: Scalar>(
    gin: &mut [T],
    gout: &[T],
    wv: T,
    (h, w): (usize, usize),
    (oh_n, ow_n): (usize, usize),
    (kh, kw): (usize, usize),
    s: usize,
    p: usize,
) {
    let (lo, hi) = valid_range(w, ow_n, kw, s, p);
    if lo >= hi {
        return;
    }
    for oh in 0..oh_n {
        let ih = (oh * s + kh) as isize - p as isize;
        if ih < 0 || ih as usize >= h {
            continue;
        }
        let g_row = &gout[oh * ow_n + lo..oh * ow_n + hi];
        let in_row = &mut gin[ih as usize * w..(ih as usize + 1) * w];
        let iw0 = lo * s + kw - p;
        for (j, &g) in g_row.iter().enumerate() {
            in_row[iw0 + j * s] += wv * g;
        }
    }
}

/// Cross-correlation with optional bias.
///
/// Each output element accumulates over input channel, then kernel row,
/// then kernel column; the bias is added last.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let out_shape = conv_output_shape(x.shape(), w.shape(), bias.map(<[T]>::len), g)?;
    let [_, c_in, h, wd] = x.shape().0;
    let [c_out, cin_g, k, _] = w.shape().0;
    let cout_g = c_out / g.groups;
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let mut out = Tensor::zeros(out_shape);
    if out_shape.numel() == 0 {
        return Ok(out);
    }
    let xd = x.data();
    let wdta = w.data();
    let plane_in = h * wd;
    let pointwise = is_pointwise(k, g);
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(idx, plane)| {
            let n = idx / c_out;
            let co = idx % c_out;
            let grp = co / cout_g;
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                let inp = &xd[(n * c_in + ci) * plane_in..(n * c_in + ci + 1) * plane_in];
                let wbase = (co * cin_g + cil) * k * k;
                if pointwise {
                    axpy(plane, inp, wdta[wbase]);
                    continue;
                }
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wdta[wbase + kh * k + kw];
                        accumulate_tap(plane, inp, wv, (h, wd), (oh, ow), (kh, kw), g.stride, g.padding);
                    }
                }
            }
            if let Some(b) = bias {
                let bv = b[co];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        });
    Ok(out)
}

pub fn conv2d_with(x: &Tensor<f32>, p: &ConvParams<f32>) -> Result<Tensor<f32>> {
    conv2d(x, &p.weight, p.bias.as_deref(), p.geom)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    x_shape: Shape,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
) -> Tensor<T> {
    let [_, c_in, h, wd] = x_shape.0;
    let [c_out, cin_g, k, _] = w.shape().0;
    let cout_g = c_out / g.groups;
    let (oh, ow) = (gout.shape().h(), gout.shape().w());
    let mut gin = Tensor::zeros(x_shape);
    if x_shape.numel() == 0 {
        return gin;
    }
    let gd = gout.data();
    let wdta = w.data();
    let pointwise = is_pointwise(k, g);
    gin.data_mut()
        .par_chunks_mut(h * wd)
        .enumerate()
        .for_each(|(idx, plane)| {
            let n = idx / c_in;
            let ci = idx % c_in;
            let grp = ci / cin_g;
            let cil = ci % cin_g;
            for co in grp * cout_g..(grp + 1) * cout_g {
                let go = &gd[(n * c_out + co) * oh * ow..(n * c_out + co + 1) * oh * ow];
                let wbase = (co * cin_g + cil) * k * k;
                if pointwise {
                    axpy(plane, go, wdta[wbase]);
                    continue;
                }
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wdta[wbase + kh * k + kw];
                        scatter_tap(plane, go, wv, (h, wd), (oh, ow), (kh, kw), g.stride, g.padding);
                    }
                }
            }
        });
    gin
}

/// Gradient of a convolution with respect to its weight.
pub fn conv2d_grad_weight<T: Scalar>(
    x: &Tensor<T>,
    w_shape: Shape,
    gout: &Tensor<T>,
    g: ConvGeom,
) -> Tensor<T> {
    let [n_b, c_in, h, wd] = x.shape().0;
    let [c_out, cin_g, k, _] = w_shape.0;
    let cout_g = c_out / g.groups;
    let (oh_n, ow_n) = (gout.shape().h(), gout.shape().w());
    let mut gw = Tensor::zeros(w_shape);
    let xd = x.data();
    let gd = gout.data();
    let (s, p) = (g.stride, g.padding);
    let pointwise = is_pointwise(k, g);
    gw.data_mut()
        .par_chunks_mut(cin_g * k * k)
        .enumerate()
        .for_each(|(co, chunk)| {
            let grp = co / cout_g;
            for cil in 0..cin_g {
                let ci = grp * cin_g + cil;
                if pointwise {
                    let mut acc = T::zero();
                    for n in 0..n_b {
                        let inp = &xd[(n * c_in + ci) * h * wd..(n * c_in + ci + 1) * h * wd];
                        let go = &gd[(n * c_out + co) * h * wd..(n * c_out + co + 1) * h * wd];
                        for (&gv, &iv) in go.iter().zip(inp) {
                            acc += gv * iv;
                        }
                    }
                    chunk[cil] = acc;
                    continue;
                }
                for kh in 0..k {
                    for kw in 0..k {
                        let (lo, hi) = valid_range(wd, ow_n, kw, s, p);
                        let mut acc = T::zero();
                        if lo < hi {
                            for n in 0..n_b {
                                let inp = &xd[(n * c_in + ci) * h * wd..(n * c_in + ci + 1) * h * wd];
                                let go = &gd[(n * c_out + co) * oh_n * ow_n..(n * c_out + co + 1) * oh_n * ow_n];
                                for oh in 0..oh_n {
                                    let ih = (oh * s + kh) as isize - p as isize;
                                    if ih < 0 || ih as usize >= h {
                                        continue;
                                    }
                                    let in_row = &inp[ih as usize * wd..];
                                    let iw0 = lo * s + kw - p;
                                    for (j, &gv) in go[oh * ow_n + lo..oh * ow_n + hi].iter().enumerate() {
                                        acc += gv * in_row[iw0 + j * s];
                                    }
                                }
                            }
                        }
                        chunk[(cil * k + kh) * k + kw] = acc;
                    }
                }
            }
        });
    gw
}

/// Sum of the output gradient per channel.
pub fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let [n, c, _, _] = t.shape().0;
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += t.plane(b, ch).iter().copied().sum::<T>();
        }
    }
    out
}

fn check_channels(op: &'static str, c: usize, lens: &[usize]) -> Result<()> {
    if c == 0 {
        return Err(Error::invalid(format!("{op}: zero-length channel dimension")));
    }
    for &l in lens {
        if l != c {
            return Err(Error::shape(op, "channel vector", c, l));
        }
    }
    Ok(())
}

/// Batch statistics saved by a training-mode batchnorm for its backward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T: Scalar> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<Tensor<T>> {
    let c = x.shape().c();
    check_channels("batchnorm", c, &[gamma.len(), beta.len(), mean.len(), var.len()])?;
    let scale: Vec<T> = (0..c).map(|i| gamma[i] / (var[i] + eps).sqrt()).collect();
    let shift: Vec<T> = (0..c).map(|i| beta[i] - mean[i] * scale[i]).collect();
    let mut out = x.clone();
    let plane = x.shape().plane();
    if plane > 0 {
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let (a, b) = (scale[ch], shift[ch]);
            for v in chunk {
                *v = *v * a + b;
            }
        }
    }
    Ok(out)
}

pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BnBatchStats<T>)> {
    let [n, c, _, _] = x.shape().0;
    check_channels("batchnorm", c, &[gamma.len(), beta.len()])?;
    let count = n * x.shape().plane();
    if count == 0 {
        return Err(Error::invalid("batchnorm: empty batch"));
    }
    let cnt = T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += x.plane(b, ch).iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m = *m / cnt;
    }
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let m = mean[ch];
            *v += x.plane(b, ch).iter().map(|&e| (e - m) * (e - m)).sum::<T>();
        }
    }
    for v in &mut var {
        *v = *v / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = x.clone();
    let plane = x.shape().plane();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = idx % c;
        let (m, is, gm, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for v in chunk {
            *v = (*v - m) * is * gm + bt;
        }
    }
    Ok((
        out,
        BnBatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)` for a batchnorm normalized with the
/// given statistics. With `batch_stats == true` the gradient also flows
/// through the batch mean and variance.
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
    gout: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, _, _] = x.shape().0;
    let plane = x.shape().plane();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let xs = x.plane(b, ch);
            let gs = gout.plane(b, ch);
            let (m, is) = (mean[ch], inv_std[ch]);
            for (&xv, &gv) in xs.iter().zip(gs) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * (xv - m) * is;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    if plane == 0 {
        return (dx, dgamma, dbeta);
    }
    let cnt = T::from_usize(n * plane).unwrap();
    for (idx, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
        let b = idx / c;
        let ch = idx % c;
        let xs = x.plane(b, ch);
        let gs = gout.plane(b, ch);
        let (m, is, gm) = (mean[ch], inv_std[ch], gamma[ch]);
        if batch_stats {
            let k = gm * is / cnt;
            for ((d, &xv), &gv) in chunk.iter_mut().zip(xs).zip(gs) {
                let xhat = (xv - m) * is;
                *d = k * (cnt * gv - dbeta[ch] - xhat * dgamma[ch]);
            }
        } else {
            for (d, &gv) in chunk.iter_mut().zip(gs) {
                *d = gv * gm * is;
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu6,
    Sigmoid,
    Swish,
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu6 => x.max(T::zero()).min(T::lit(6.0)),
            Activation::Sigmoid => sigmoid(x),
            Activation::Swish => x * sigmoid(x),
        }
    }

    /// Derivative at input `x`.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu6 => {
                if x > T::zero() && x < T::lit(6.0) {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            }
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

pub fn activation_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let mut g = gout.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        *gv = *gv * kind.derivative(xv);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeDir {
    Up,
    Down,
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::invalid(format!("resize: factor {factor} is not a power of two")));
    }
    Ok(())
}

/// Nearest-neighbour upsampling or average-pool downsampling by `factor`.
pub fn resize<T: Scalar>(x: &Tensor<T>, factor: usize, dir: ResizeDir) -> Result<Tensor<T>> {
    check_factor(factor)?;
    let [n, c, h, w] = x.shape().0;
    match dir {
        ResizeDir::Up => {
            let (oh, ow) = (h * factor, w * factor);
            let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
            if out.numel() == 0 {
                return Ok(out);
            }
            for (idx, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
                let src = x.plane(idx / c, idx % c);
                for y in 0..oh {
                    let row = &src[(y / factor) * w..(y / factor + 1) * w];
                    for (xo, v) in plane[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                        *v = row[xo / factor];
                    }
                }
            }
            Ok(out)
        }
        ResizeDir::Down => {
            if h % factor != 0 {
                return Err(Error::shape("resize", "height (divisible)", factor, h));
            }
            if w % factor != 0 {
                return Err(Error::shape("resize", "width (divisible)", factor, w));
            }
            let (oh, ow) = (h / factor, w / factor);
            let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
            if out.numel() == 0 {
                return Ok(out);
            }
            let inv = T::one() / T::from_usize(factor * factor).unwrap();
            for (idx, plane) in out.data_mut().chunks_mut(oh * ow).enumerate() {
                let src = x.plane(idx / c, idx % c);
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = T::zero();
                        for dy in 0..factor {
                            let row = &src[(y * factor + dy) * w + xo * factor..];
                            for &v in &row[..factor] {
                                acc += v;
                            }
                        }
                        plane[y * ow + xo] = acc * inv;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Adjoint of [`resize`]: gradient with respect to the resize input.
pub fn resize_backward<T: Scalar>(gout: &Tensor<T>, factor: usize, dir: ResizeDir) -> Tensor<T> {
    let [n, c, oh, ow] = gout.shape().0;
    match dir {
        ResizeDir::Up => {
            let (h, w) = (oh / factor, ow / factor);
            let mut g = Tensor::zeros(Shape::new(n, c, h, w));
            if g.numel() == 0 {
                return g;
            }
            for (idx, plane) in g.data_mut().chunks_mut(h * w).enumerate() {
                let src = gout.plane(idx / c, idx % c);
                for y in 0..oh {
                    for xo in 0..ow {
                        plane[(y / factor) * w + xo / factor] += src[y * ow + xo];
                    }
                }
            }
            g
        }
        ResizeDir::Down => {
            let (h, w) = (oh * factor, ow * factor);
            let mut g = Tensor::zeros(Shape::new(n, c, h, w));
            if g.numel() == 0 {
                return g;
            }
            let inv = T::one() / T::from_usize(factor * factor).unwrap();
            for (idx, plane) in g.data_mut().chunks_mut(h * w).enumerate() {
                let src = gout.plane(idx / c, idx % c);
                for y in 0..h {
                    for xo in 0..w {
                        plane[y * w + xo] = src[(y / factor) * ow + xo / factor] * inv;
                    }
                }
            }
            g
        }
    }
}

/// Fast-normalized fusion weights `max(w,0) / (sum max(w,0) + eps)`.
pub fn fusion_coefficients<T: Scalar>(weights: &[T], eps: T) -> Vec<T> {
    let relu: Vec<T> = weights.iter().map(|&w| w.max(T::zero())).collect();
    let denom = relu.iter().copied().sum::<T>() + eps;
    if denom == T::zero() {
        return vec![T::zero(); weights.len()];
    }
    relu.iter().map(|&r| r / denom).collect()
}

pub fn weighted_fusion<T: Scalar>(inputs: &[&Tensor<T>], weights: &[T], eps: T) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("weighted_fusion: empty input list"))?;
    if weights.len() != inputs.len() {
        return Err(Error::shape("weighted_fusion", "weight count", inputs.len(), weights.len()));
    }
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(Error::shape("weighted_fusion", "input numel", first.numel(), t.numel()));
        }
    }
    let coef = fusion_coefficients(weights, eps);
    let mut out = Tensor::zeros(first.shape());
    for (t, &a) in inputs.iter().zip(&coef) {
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Returns per-input gradients and the gradient of the raw weights.
pub fn weighted_fusion_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    weights: &[T],
    eps: T,
    gout: &Tensor<T>,
) -> (Vec<Tensor<T>>, Vec<T>) {
    let coef = fusion_coefficients(weights, eps);
    let relu: Vec<T> = weights.iter().map(|&w| w.max(T::zero())).collect();
    let denom = relu.iter().copied().sum::<T>() + eps;
    let dots: Vec<T> = inputs
        .iter()
        .map(|t| t.data().iter().zip(gout.data()).map(|(&a, &b)| a * b).sum::<T>())
        .collect();
    let gin = coef.iter().map(|&a| gout.map(|g| g * a)).collect();
    let mut gw = vec![T::zero(); weights.len()];
    if denom != T::zero() {
        let weighted: T = relu.iter().zip(&dots).map(|(&r, &d)| r * d).sum();
        for i in 0..weights.len() {
            if weights[i] > T::zero() {
                gw[i] = dots[i] / denom - weighted / (denom * denom);
            }
        }
    }
    (gin, gw)
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape().0;
    if h == 0 || w == 0 {
        return Err(Error::invalid("global_avg_pool: empty spatial extent"));
    }
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut out = Tensor::zeros(Shape::new(n, c, 1, 1));
    for b in 0..n {
        for ch in 0..c {
            let s: T = x.plane(b, ch).iter().copied().sum();
            out.set(b, ch, 0, 0, s * inv);
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: Shape, gout: &Tensor<T>) -> Tensor<T> {
    let [_, c, h, w] = x_shape.0;
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let mut g = Tensor::zeros(x_shape);
    for (idx, plane) in g.data_mut().chunks_mut(h * w).enumerate() {
        let v = gout.data()[idx] * inv;
        debug_assert_eq!(idx % c, idx - (idx / c) * c);
        plane.fill(v);
    }
    g
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("add", a.shape(), b.shape())?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("mul", a.shape(), b.shape())?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * v;
    }
    Ok(out)
}

fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    const DIMS: [&str; 4] = ["n", "c", "h", "w"];
    for i in 0..4 {
        if a.0[i] != b.0[i] {
            return Err(Error::shape(op, DIMS[i], a.0[i], b.0[i]));
        }
    }
    Ok(())
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels: empty input list"))?;
    let [n, _, h, w] = first.shape().0;
    let mut c_total = 0;
    for t in inputs {
        let s = t.shape();
        if s.n() != n {
            return Err(Error::shape("concat_channels", "n", n, s.n()));
        }
        if s.h() != h {
            return Err(Error::shape("concat_channels", "h", h, s.h()));
        }
        if s.w() != w {
            return Err(Error::shape("concat_channels", "w", w, s.w()));
        }
        c_total += s.c();
    }
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for t in inputs {
            let per = t.shape().c() * h * w;
            data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::from_vec(Shape::new(n, c_total, h, w), data)
}

pub fn concat_channels_backward<T: Scalar>(shapes: &[Shape], gout: &Tensor<T>) -> Vec<Tensor<T>> {
    let [n, c_total, h, w] = gout.shape().0;
    let mut out: Vec<Tensor<T>> = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    for b in 0..n {
        let mut c0 = 0;
        for t in out.iter_mut() {
            let c = t.shape().c();
            let src = &gout.data()[(b * c_total + c0) * h * w..(b * c_total + c0 + c) * h * w];
            t.data_mut()[b * c * h * w..(b + 1) * c * h * w].copy_from_slice(src);
            c0 += c;
        }
    }
    out
}

/// Multiplies every `(h, w)` plane by the matching `(n, c)` gate entry.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, _, _] = x.shape().0;
    let gs = gate.shape();
    if gs.n() != n || gs.c() != c || gs.plane() != 1 {
        return Err(Error::shape("channel_scale", "gate channels", n * c, gs.numel()));
    }
    let mut out = x.clone();
    let plane = x.shape().plane();
    if plane > 0 {
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let g = gate.data()[idx];
            for v in chunk {
                *v = *v * g;
            }
        }
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let plane = x.shape().plane();
    let mut gx = gout.clone();
    let mut gg = Tensor::zeros(gate.shape());
    for idx in 0..gate.numel() {
        let g = gate.data()[idx];
        let xs = &x.data()[idx * plane..(idx + 1) * plane];
        let gs = &gout.data()[idx * plane..(idx + 1) * plane];
        gg.data_mut()[idx] = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for v in &mut gx.data_mut()[idx * plane..(idx + 1) * plane] {
            *v = *v * g;
        }
    }
    (gx, gg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(Shape(shape), data).unwrap()
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = t([1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.5, 0.0, -1.0]);
        let w = t([1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, ConvGeom::pointwise()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f32);
        let y = conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f32>::zeros(Shape::new(2, 4, 1, 1));
        let err = conv2d(&x, &w, None, ConvGeom::pointwise()).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let w = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let err = conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn bn_identity_in_inference() {
        let x = t([1, 2, 1, 2], vec![0.5, -1.0, 2.0, 3.0]);
        let y = batchnorm_infer(&x, &[1.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], 1e-5).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn bn_constant_input_gives_beta() {
        let x = Tensor::full(Shape::new(2, 2, 3, 3), 4.0f32);
        let (y, _) = batchnorm_train(&x, &[2.0, 3.0], &[0.25, -1.0], 1e-5).unwrap();
        for b in 0..2 {
            assert!(y.plane(b, 0).iter().all(|&v| (v - 0.25).abs() < 1e-6));
            assert!(y.plane(b, 1).iter().all(|&v| (v + 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn bn_rejects_zero_channels() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 0, 2, 2));
        assert!(batchnorm_infer(&x, &[], &[], &[], &[], 1e-5).is_err());
    }

    #[test]
    fn activation_endpoints() {
        assert_eq!(Activation::Relu6.apply(7.5f32), 6.0);
        assert_eq!(Activation::Relu6.apply(-1.0f32), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0f32), 0.5);
        assert_eq!(Activation::Swish.apply(0.0f32), 0.0);
    }

    #[test]
    fn resize_up_then_down() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let up = resize(&x, 2, ResizeDir::Up).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let down = resize(&up, 2, ResizeDir::Down).unwrap();
        assert_eq!(down, x);
    }

    #[test]
    fn resize_rejects_indivisible_and_non_power_of_two() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 6, 6));
        assert!(resize(&x, 4, ResizeDir::Down).is_err());
        assert!(resize(&x, 3, ResizeDir::Up).is_err());
    }

    #[test]
    fn fusion_degenerate_cases() {
        let a = t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        let b = t([1, 1, 1, 3], vec![-5.0, 7.0, 0.5]);
        let same = weighted_fusion(&[&a, &a], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(same, a);
        let first = weighted_fusion(&[&a, &b], &[1.0, 0.0], 1e-4).unwrap();
        assert!(first.max_abs_diff(&a) < 1e-3 * 3.0);
        let first_exact = weighted_fusion(&[&a, &b], &[1.0, 0.0], 0.0).unwrap();
        assert_eq!(first_exact, a);
        assert!(weighted_fusion::<f32>(&[], &[], 0.0).is_err());
        let c = Tensor::<f32>::zeros(Shape::new(1, 1, 1, 2));
        assert!(weighted_fusion(&[&a, &c], &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::full(Shape::new(2, 3, 4, 5), 3.0f32);
        let y = global_avg_pool(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
        let x = t([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().item(), 2.5);
    }

    #[test]
    fn add_and_concat_layout() {
        let x = t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        let a = Tensor::full(Shape::new(1, 2, 4, 4), 1.0f32);
        let b = Tensor::full(Shape::new(1, 3, 4, 4), 2.0f32);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 5, 4, 4));
        assert_eq!(&c.data()[..32], a.data());
        assert!(add(&a, &b).is_err());
        let d = Tensor::full(Shape::new(1, 3, 2, 4), 2.0f32);
        assert!(concat_channels(&[&a, &d]).is_err());
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for w in 1..9 {
            for k in [1usize, 3, 5] {
                for s in 1..3 {
                    for p in 0..3 {
                        let Some(ow) = conv_out_len(w, k, s, p) else { continue };
                        for kw in 0..k {
                            let (lo, hi) = valid_range(w, ow, kw, s, p);
                            let brute: Vec<usize> = (0..ow)
                                .filter(|&o| {
                                    let iw = (o * s + kw) as isize - p as isize;
                                    iw >= 0 && (iw as usize) < w
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(brute, got, "w={w} k={k} s={s} p={p} kw={kw}");
                        }
                    }
                }
            }
        }
    }
}
