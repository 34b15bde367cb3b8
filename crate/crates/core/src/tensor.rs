//! Dense `f64` tensors in batch-channel-height-width order.
//!
//! Storage is NCHW for cache-friendly convolutions; the `(H, W, C)` accessors
//! give the channel-last view used throughout the model code.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Builds a single-image, single-channel tensor from row-major rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec([1, 1, h, w], rows.concat())
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Spatial size of one channel plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Channel-last accessor: value at row `y`, column `x`, channel `c` of image `n`.
    pub fn at_hwc(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.get(n, c, y, x)
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_shape(&self, shape: [usize; 4]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "expected shape {:?}, got {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies image `n` out of a batch.
    pub fn select(&self, n: usize) -> Self {
        let per = self.len() / self.batch();
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Copies channel `c` of every image.
    pub fn channel(&self, c: usize) -> Self {
        let [n, _, h, w] = self.shape;
        let mut out = Self::zeros([n, 1, h, w]);
        for b in 0..n {
            let src = self.index(b, c, 0, 0);
            out.data[b * h * w..(b + 1) * h * w].copy_from_slice(&self.data[src..src + h * w]);
        }
        out
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Mirrors every plane left-right.
    pub fn flip_horizontal(&self) -> Self {
        let [_, _, h, w] = self.shape;
        let mut out = self.clone();
        for plane in out.data.chunks_mut(h * w) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
        out
    }

    /// Mirrors every plane top-bottom.
    pub fn flip_vertical(&self) -> Self {
        let [_, _, h, w] = self.shape;
        let mut out = self.clone();
        for (dst, src) in out.data.chunks_mut(h * w).zip(self.data.chunks(h * w)) {
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
            }
        }
        out
    }

    /// Rotates every plane by 90 degrees; `clockwise` selects the direction.
    pub fn rotate90(&self, clockwise: bool) -> Self {
        let [n, c, h, w] = self.shape;
        let mut out = Self::zeros([n, c, w, h]);
        for (dst, src) in out.data.chunks_mut(h * w).zip(self.data.chunks(h * w)) {
            for y in 0..h {
                for x in 0..w {
                    let (ny, nx) = if clockwise { (x, h - 1 - y) } else { (w - 1 - x, y) };
                    dst[ny * h + nx] = src[y * w + x];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_are_involutions() {
        let t = Tensor::from_fn([2, 3, 4, 5], |n, c, y, x| (n * 100 + c * 20 + y * 5 + x) as f64);
        assert_eq!(t.flip_horizontal().flip_horizontal(), t);
        assert_eq!(t.flip_vertical().flip_vertical(), t);
    }

    #[test]
    fn four_rotations_are_identity() {
        let t = Tensor::from_fn([1, 2, 3, 5], |_, c, y, x| (c * 15 + y * 5 + x) as f64);
        let r = t.rotate90(true);
        assert_eq!(r.shape(), [1, 2, 5, 3]);
        assert_eq!(r.rotate90(false), t);
        assert_eq!(r.rotate90(true).rotate90(true).rotate90(true), t);
        // top-left goes to top-right under a clockwise turn
        assert_eq!(r.get(0, 0, 0, 2), t.get(0, 0, 0, 0));
    }

    #[test]
    fn stack_and_select_roundtrip() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 2, 2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), [2, 2, 2, 2]);
        assert_eq!(s.select(1), b);
        assert!(Tensor::stack(&[a, Tensor::zeros([1, 1, 2, 2])]).is_err());
    }

    #[test]
    fn hwc_accessor_matches_storage() {
        let t = Tensor::from_fn([1, 3, 2, 2], |_, c, y, x| (c * 4 + y * 2 + x) as f64);
        assert_eq!(t.at_hwc(0, 1, 0, 2), 10.0);
    }
}
