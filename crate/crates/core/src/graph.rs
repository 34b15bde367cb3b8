//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the inputs it was computed from. [`Graph::backward`] walks the tape in
//! reverse once and returns the gradient of a scalar node with respect to
//! every node. Parameters enter through [`Graph::param`], which binds each
//! named tensor of a [`ParamStore`] to a single leaf so shared weights
//! accumulate their gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Axis, ConvGeometry};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `[N,C,H,W] * [N,1,H,W]`
    MulMask(Var, Var),
    /// `[N,C,H,W] * [N,C,1,1]`
    MulGate(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Square(Var),
    Abs(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Sigmoid(Var),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool(Var, usize),
    LocalMean3(Var),
    GlobalAvg(Var),
    GlobalMax(Var, Vec<usize>),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Concat(Vec<Var>),
    Resize(Var),
    Diff(Var, Axis),
    Magnitude(Var, Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    bound: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every parameter bound during the forward pass.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, v)| self.get(*v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, shape: [usize; 4], value: f64) -> Var {
        self.push(Tensor::full(shape, value), Op::Leaf)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies every channel of `x` by the single-channel `mask`.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(mask) != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "mask {:?} does not broadcast over {:?}",
                self.shape(mask),
                [n, c, h, w]
            )));
        }
        let (xv, mv) = (self.value(x), self.value(mask));
        let mut out = xv.clone();
        let plane = h * w;
        for b in 0..n {
            let m = &mv.data()[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let start = (b * c + ch) * plane;
                for (o, &mm) in out.data_mut()[start..start + plane].iter_mut().zip(m) {
                    *o *= mm;
                }
            }
        }
        Ok(self.push(out, Op::MulMask(x, mask)))
    }

    /// Multiplies each channel plane of `x` by the matching entry of `gate`.
    pub fn mul_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(gate) != [n, c, 1, 1] {
            return Err(Error::Shape(format!(
                "gate {:?} does not broadcast over {:?}",
                self.shape(gate),
                [n, c, h, w]
            )));
        }
        let mut out = self.value(x).clone();
        let gv = self.value(gate).data().to_vec();
        for (plane, g) in out.data_mut().chunks_mut(h * w).zip(gv) {
            plane.iter_mut().for_each(|v| *v *= g);
        }
        Ok(self.push(out, Op::MulGate(x, gate)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v + k);
        self.push(value, Op::Offset(x))
    }

    /// `k - x`
    pub fn rsub_scalar(&mut self, k: f64, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, k)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Ln(x))
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(x, lo, hi))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = kernels::avg_pool(self.value(x), k)?;
        Ok(self.push(value, Op::AvgPool(x, k)))
    }

    pub fn local_mean3(&mut self, x: Var) -> Var {
        let value = kernels::local_mean3(self.value(x));
        self.push(value, Op::LocalMean3(x))
    }

    /// Mean of every channel plane, giving `[N,C,1,1]`.
    pub fn global_avg(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let value = Tensor::from_vec([n, c, 1, 1], data).expect("plane count");
        self.push(value, Op::GlobalAvg(x))
    }

    /// Max of every channel plane, giving `[N,C,1,1]`.
    pub fn global_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let mut arg = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (i, p) in self.value(x).data().chunks(h * w).enumerate() {
            let (k, m) = argmax(p.iter().copied());
            arg.push(i * h * w + k);
            data.push(m);
        }
        let value = Tensor::from_vec([n, c, 1, 1], data).expect("plane count");
        self.push(value, Op::GlobalMax(x, arg))
    }

    /// Per-pixel mean over channels, giving `[N,1,H,W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            let dst = &mut out.data_mut()[b * h * w..(b + 1) * h * w];
            for ch in 0..c {
                let start = xv.index(b, ch, 0, 0);
                for (d, s) in dst.iter_mut().zip(&xv.data()[start..start + h * w]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|v| *v /= c as f64);
        }
        self.push(out, Op::ChannelMean(x))
    }

    /// Per-pixel max over channels, giving `[N,1,H,W]`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, 1, h, w]);
        let mut arg = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for p in 0..h * w {
                let (k, m) = argmax((0..c).map(|ch| xv.data()[xv.index(b, ch, 0, 0) + p]));
                out.data_mut()[b * h * w + p] = m;
                arg.push(xv.index(b, k, 0, 0) + p);
            }
        }
        self.push(out, Op::ChannelMax(x, arg))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.shape(first);
        let mut total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.shape(x);
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat of {:?} with {:?}",
                    self.shape(x),
                    self.shape(first)
                )));
            }
            total += xc;
        }
        let mut out = Tensor::zeros([n, total, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for &x in xs {
                let xv = self.value(x);
                let len = xv.channels() * h * w;
                let dst = out.index(b, offset, 0, 0);
                out.data_mut()[dst..dst + len].copy_from_slice(&xv.data()[b * len..(b + 1) * len]);
                offset += xv.channels();
            }
        }
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        if self.shape(x)[2..] == [height, width] {
            return Ok(x);
        }
        let value = kernels::resize_bilinear(self.value(x), height, width)?;
        Ok(self.push(value, Op::Resize(x)))
    }

    pub fn diff(&mut self, x: Var, axis: Axis) -> Var {
        let value = kernels::central_diff(self.value(x), axis);
        self.push(value, Op::Diff(x, axis))
    }

    /// `sqrt(a^2 + b^2)` with the subgradient 0 taken where both vanish.
    pub fn magnitude(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "magnitude", f64::hypot, Op::Magnitude(a, b))
    }

    /// Mean over all elements, as a `[1,1,1,1]` scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy.clone());
                accumulate(grads, *b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, gy.zip_map(val(*b), |g, bv| g * bv).unwrap());
                accumulate(grads, *b, gy.zip_map(val(*a), |g, av| g * av).unwrap());
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                accumulate(grads, *a, gy.zip_map(bv, |g, d| g / d).unwrap());
                let t = gy.zip_map(y, |g, q| g * q).unwrap();
                accumulate(grads, *b, t.zip_map(bv, |gq, d| -gq / d).unwrap());
            }
            Op::MulMask(x, m) => {
                let (xv, mv) = (val(*x), val(*m));
                let [n, c, h, w] = xv.shape();
                let plane = h * w;
                let mut gx = gy.clone();
                let mut gm = Tensor::zeros(mv.shape());
                for b in 0..n {
                    let mask = &mv.data()[b * plane..(b + 1) * plane];
                    let gmb = &mut gm.data_mut()[b * plane..(b + 1) * plane];
                    for ch in 0..c {
                        let s = (b * c + ch) * plane;
                        let gyp = &gy.data()[s..s + plane];
                        let xp = &xv.data()[s..s + plane];
                        for p in 0..plane {
                            gmb[p] += gyp[p] * xp[p];
                        }
                        for (g, &mm) in gx.data_mut()[s..s + plane].iter_mut().zip(mask) {
                            *g *= mm;
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *m, gm);
            }
            Op::MulGate(x, gt) => {
                let (xv, gv) = (val(*x), val(*gt));
                let plane = xv.plane();
                let mut gx = gy.clone();
                let mut gg = Tensor::zeros(gv.shape());
                for (k, (gxp, (gyp, xp))) in gx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(gy.data().chunks(plane).zip(xv.data().chunks(plane)))
                    .enumerate()
                {
                    let g = gv.data()[k];
                    gg.data_mut()[k] = gyp.iter().zip(xp).map(|(a, b)| a * b).sum();
                    gxp.iter_mut().for_each(|v| *v *= g);
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gt, gg);
            }
            Op::Scale(x, k) => accumulate(grads, *x, gy.map(|g| g * k)),
            Op::Offset(x) => accumulate(grads, *x, gy.clone()),
            Op::Square(x) => accumulate(grads, *x, gy.zip_map(val(*x), |g, v| 2.0 * g * v).unwrap()),
            Op::Abs(x) => accumulate(
                grads,
                *x,
                gy.zip_map(val(*x), |g, v| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })
                    .unwrap(),
            ),
            Op::Ln(x) => accumulate(grads, *x, gy.zip_map(val(*x), |g, v| g / v).unwrap()),
            Op::Clamp(x, lo, hi) => accumulate(
                grads,
                *x,
                gy.zip_map(val(*x), |g, v| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .unwrap(),
            ),
            Op::Sigmoid(x) => accumulate(grads, *x, gy.zip_map(y, |g, s| g * s * (1.0 - s)).unwrap()),
            Op::Relu(x) => accumulate(
                grads,
                *x,
                gy.zip_map(val(*x), |g, v| if v > 0.0 { g } else { 0.0 }).unwrap(),
            ),
            Op::Conv { x, w, b, geom } => {
                let cg = kernels::conv2d_backward(val(*x), val(*w), gy, geom);
                accumulate(grads, *x, cg.input);
                accumulate(grads, *w, cg.weight);
                if let Some(b) = b {
                    accumulate(grads, *b, cg.bias);
                }
            }
            Op::AvgPool(x, k) => accumulate(grads, *x, kernels::avg_pool_backward(val(*x).shape(), gy, *k)),
            Op::LocalMean3(x) => accumulate(grads, *x, kernels::local_mean3_backward(gy)),
            Op::GlobalAvg(x) => {
                let xv = val(*x);
                let plane = xv.plane();
                let mut gx = Tensor::zeros(xv.shape());
                for (p, g) in gx.data_mut().chunks_mut(plane).zip(gy.data()) {
                    p.fill(g / plane as f64);
                }
                accumulate(grads, *x, gx);
            }
            Op::GlobalMax(x, arg) | Op::ChannelMax(x, arg) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&k, g) in arg.iter().zip(gy.data()) {
                    gx.data_mut()[k] += g;
                }
                accumulate(grads, *x, gx);
            }
            Op::ChannelMean(x) => {
                let xv = val(*x);
                let [n, c, h, w] = xv.shape();
                let mut gx = Tensor::zeros(xv.shape());
                for b in 0..n {
                    let src = &gy.data()[b * h * w..(b + 1) * h * w];
                    for ch in 0..c {
                        let s = gx.index(b, ch, 0, 0);
                        for (d, g) in gx.data_mut()[s..s + h * w].iter_mut().zip(src) {
                            *d = g / c as f64;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let [n, _, h, w] = gy.shape();
                let mut offset = 0;
                for &x in xs {
                    let xshape = val(x).shape();
                    let len = xshape[1] * h * w;
                    let mut gx = Tensor::zeros(xshape);
                    for b in 0..n {
                        let src = gy.index(b, offset, 0, 0);
                        gx.data_mut()[b * len..(b + 1) * len].copy_from_slice(&gy.data()[src..src + len]);
                    }
                    offset += xshape[1];
                    accumulate(grads, x, gx);
                }
            }
            Op::Resize(x) => accumulate(grads, *x, kernels::resize_bilinear_backward(val(*x).shape(), gy)),
            Op::Diff(x, axis) => accumulate(grads, *x, kernels::central_diff_backward(gy, *axis)),
            Op::Magnitude(a, b) => {
                let safe = |g: f64, comp: f64, r: f64| if r > 0.0 { g * comp / r } else { 0.0 };
                let ga = Tensor::from_vec(
                    y.shape(),
                    (0..y.len())
                        .map(|k| safe(gy.data()[k], val(*a).data()[k], y.data()[k]))
                        .collect(),
                )
                .unwrap();
                let gb = Tensor::from_vec(
                    y.shape(),
                    (0..y.len())
                        .map(|k| safe(gy.data()[k], val(*b).data()[k], y.data()[k]))
                        .collect(),
                )
                .unwrap();
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Mean(x) => {
                let xv = val(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), gy.data()[0] / xv.len() as f64));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// First index of the maximum; ties resolve to the lowest index.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
