//! Forward kernels and their adjoints over [`Tensor`].
//!
//! Every `*_backward` function is the exact transpose of its forward
//! counterpart; the autodiff tape in [`crate::graph`] only wires them up.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How out-of-bounds taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Clamp to the nearest border pixel.
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub pad_mode: PadMode,
}

impl ConvGeometry {
    /// `kernel`x`kernel`, stride 1, padding that keeps the spatial size.
    pub fn same(kernel: usize, dilation: usize, pad_mode: PadMode) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            pad_mode,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        if h + 2 * self.padding < span || w + 2 * self.padding < span {
            return Err(Error::Shape(format!(
                "{h}x{w} input too small for kernel span {span}"
            )));
        }
        Ok((
            (h + 2 * self.padding - span) / self.stride + 1,
            (w + 2 * self.padding - span) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Source coordinate for output position `o` and tap `k`, or `None` when the
/// tap falls in zero padding.
#[inline]
fn tap(o: usize, k: usize, g: &ConvGeometry, size: usize) -> Option<usize> {
    let pos = (o * g.stride + k * g.dilation) as isize - g.padding as isize;
    if pos >= 0 && (pos as usize) < size {
        Some(pos as usize)
    } else {
        match g.pad_mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(pos.clamp(0, size as isize - 1) as usize),
        }
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let p = oh * ow;
    let ys: Vec<Vec<Option<usize>>> = (0..k).map(|ky| (0..oh).map(|oy| tap(oy, ky, g, h)).collect()).collect();
    let xs: Vec<Vec<Option<usize>>> = (0..k).map(|kx| (0..ow).map(|ox| tap(ox, kx, g, w)).collect()).collect();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    match ys[ky][oy] {
                        None => out.fill(0.0),
                        Some(sy) => {
                            let src = &plane[sy * w..(sy + 1) * w];
                            for (ox, o) in out.iter_mut().enumerate() {
                                *o = match xs[kx][ox] {
                                    Some(sx) => src[sx],
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

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, dx: &mut [f64]) {
    let k = g.kernel;
    let p = oh * ow;
    let ys: Vec<Vec<Option<usize>>> = (0..k).map(|ky| (0..oh).map(|oy| tap(oy, ky, g, h)).collect()).collect();
    let xs: Vec<Vec<Option<usize>>> = (0..k).map(|kx| (0..ow).map(|ox| tap(ox, kx, g, w)).collect()).collect();
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let Some(sy) = ys[ky][oy] else { continue };
                    for ox in 0..ow {
                        if let Some(sx) = xs[kx][ox] {
                            plane[sy * w + sx] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    // row-major `a` is m x k; a transposed view swaps the strides of a k x m buffer
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover the m x k, k x n and m x n extents implied by the strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution (cross-correlation). `weight` is `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: &ConvGeometry) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let [co, ci, kh, kw] = weight.shape();
    if ci != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    if let Some(b) = bias {
        b.expect_shape([1, co, 1, 1])?;
    }
    let (oh, ow) = g.output_size(h, w)?;
    let kdim = c * g.kernel * g.kernel;
    let p = oh * ow;
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, w, g, oh, ow, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[b * co * p..(b + 1) * co * p];
        gemm(co, kdim, p, weight.data(), false, src, false, 0.0, ob);
        if let Some(bias) = bias {
            for (oc, plane) in ob.chunks_mut(p).enumerate() {
                let bv = bias.data()[oc];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, weight: &Tensor, dy: &Tensor, g: &ConvGeometry) -> ConvGrads {
    let [n, c, h, w] = x.shape();
    let [co, _, _, _] = weight.shape();
    let [_, _, oh, ow] = dy.shape();
    let kdim = c * g.kernel * g.kernel;
    let p = oh * ow;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros([1, co, 1, 1]);
    let mut cols = vec![0.0; kdim * p];
    for b in 0..n {
        let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
        let dyb = &dy.data()[b * co * p..(b + 1) * co * p];
        for (oc, plane) in dyb.chunks(p).enumerate() {
            db.data_mut()[oc] += plane.iter().sum::<f64>();
        }
        let dxb = &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
        if g.is_pointwise() {
            // dW += dY * X^T ; dX = W^T * dY
            gemm(co, p, kdim, dyb, false, xb, true, 1.0, dw.data_mut());
            gemm(kdim, co, p, weight.data(), true, dyb, false, 0.0, dxb);
        } else {
            im2col(xb, c, h, w, g, oh, ow, &mut cols);
            gemm(co, p, kdim, dyb, false, &cols, true, 1.0, dw.data_mut());
            gemm(kdim, co, p, weight.data(), true, dyb, false, 0.0, &mut cols);
            col2im(&cols, c, h, w, g, oh, ow, dxb);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Non-overlapping `k`x`k` average pooling; trailing rows/columns that do not
/// fill a window are dropped (floor division).
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / k, w / k);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("{h}x{w} map cannot be pooled by {k}")));
    }
    let norm = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for (dst, src) in out.data_mut().chunks_mut(oh * ow).zip(x.data().chunks(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..];
                    acc += row[..k].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = acc * norm;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(input_shape: [usize; 4], dy: &Tensor, k: usize) -> Tensor {
    let [_, _, h, w] = input_shape;
    let [_, _, oh, ow] = dy.shape();
    let norm = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(input_shape);
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * norm;
                for dy in 0..k {
                    for dx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// 3x3 box mean that averages only in-bounds neighbours, so constants are
/// reproduced exactly at the borders.
pub fn local_mean3(x: &Tensor) -> Tensor {
    let [_, _, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(x.data().chunks(h * w)) {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let mut acc = 0.0;
                for sy in y0..=y1 {
                    acc += src[sy * w + x0..=sy * w + x1].iter().sum::<f64>();
                }
                dst[y * w + xx] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            }
        }
    }
    out
}

pub fn local_mean3_backward(dy: &Tensor) -> Tensor {
    let [_, _, h, w] = dy.shape();
    let mut dx = Tensor::zeros(dy.shape());
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(h * w)) {
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
                let g = src[y * w + xx] / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                for sy in y0..=y1 {
                    for sx in x0..=x1 {
                        dst[sy * w + sx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// One output axis of a bilinear resize: `(lower index, upper index, weight of upper)`.
///
/// Half-pixel centres (`align_corners = false`): output pixel `o` samples the
/// source at `(o + 0.5) * in / out - 0.5`, clamped to the valid range.
fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resampling of every plane to `(height, width)`.
///
/// Interpolation is written as `a + t * (b - a)` and clamped to the corner
/// range, so constant maps are reproduced bit-exactly and the output never
/// leaves `[min, max]` of its four source taps.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid(format!(
            "resize target {height}x{width} must be positive"
        )));
    }
    let [n, c, h, w] = x.shape();
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ys = bilinear_axis(h, height);
    let xs = bilinear_axis(w, width);
    let mut out = Tensor::zeros([n, c, height, width]);
    for (dst, src) in out.data_mut().chunks_mut(height * width).zip(x.data().chunks(h * w)) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                let top = a + fx * (b - a);
                let bot = c + fx * (d - c);
                let v = top + fy * (bot - top);
                let lo = a.min(b).min(c).min(d);
                let hi = a.max(b).max(c).max(d);
                // NaN must survive so callers can detect it
                dst[oy * width + ox] = if v.is_nan() { v } else { v.max(lo).min(hi) };
            }
        }
    }
    Ok(out)
}

pub fn resize_bilinear_backward(input_shape: [usize; 4], dy: &Tensor) -> Tensor {
    let [_, _, h, w] = input_shape;
    let [_, _, height, width] = dy.shape();
    if (h, w) == (height, width) {
        return dy.clone();
    }
    let ys = bilinear_axis(h, height);
    let xs = bilinear_axis(w, width);
    let mut dx = Tensor::zeros(input_shape);
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(height * width)) {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = src[oy * width + ox];
                dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                dst[y1 * w + x0] += g * fy * (1.0 - fx);
                dst[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along columns (left-right).
    X,
    /// Along rows (top-bottom).
    Y,
}

/// Central difference `(f[i+1] - f[i-1]) / 2` with replicate borders.
pub fn central_diff(x: &Tensor, axis: Axis) -> Tensor {
    let [_, _, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(x.data().chunks(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let (lo, hi) = match axis {
                    Axis::X => (y * w + xx.saturating_sub(1), y * w + (xx + 1).min(w - 1)),
                    Axis::Y => (y.saturating_sub(1) * w + xx, (y + 1).min(h - 1) * w + xx),
                };
                dst[y * w + xx] = 0.5 * (src[hi] - src[lo]);
            }
        }
    }
    out
}

pub fn central_diff_backward(dy: &Tensor, axis: Axis) -> Tensor {
    let [_, _, h, w] = dy.shape();
    let mut dx = Tensor::zeros(dy.shape());
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let (lo, hi) = match axis {
                    Axis::X => (y * w + xx.saturating_sub(1), y * w + (xx + 1).min(w - 1)),
                    Axis::Y => (y.saturating_sub(1) * w + xx, (y + 1).min(h - 1) * w + xx),
                };
                let g = 0.5 * src[y * w + xx];
                dst[hi] += g;
                dst[lo] -= g;
            }
        }
    }
    dx
}
