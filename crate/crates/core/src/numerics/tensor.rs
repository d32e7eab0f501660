use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense `N x C x H x W` array of `f64` in row-major order.
///
/// Gradients are not stored on the tensor itself; a [`Tape`](super::Tape)
/// tracks which values require them.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    /// Builds a tensor, checking the length and that every element is finite.
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let t = Self::from_raw(shape, data)?;
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Builds a tensor checking only the length.
    pub fn from_raw(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn raw(shape: [usize; 4], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    /// Standard normal samples scaled by `std`.
    pub fn normal<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n)
                .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect(),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
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
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `H x W` plane for batch item `n`, channel `c`.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape, "zip_map")?;
        Ok(Self::raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn expect_shape(&self, shape: [usize; 4], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::dim(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }

    /// Copies channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c || len == 0 {
            return Err(Error::dim(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let p = h * w;
        let mut out = Vec::with_capacity(n * len * p);
        for b in 0..n {
            let base = (b * c + start) * p;
            out.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Self::raw([n, len, h, w], out))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let [n, _, h, w] = first.shape;
        let mut c_total = 0;
        for p in parts {
            if p.n() != n || p.h() != h || p.w() != w {
                return Err(Error::dim(format!(
                    "concat: {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
            c_total += p.c();
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for p in parts {
                let len = p.c() * plane;
                out.extend_from_slice(&p.data[b * len..(b + 1) * len]);
            }
        }
        Ok(Self::raw([n, c_total, h, w], out))
    }

    /// Crops the spatial window `[y0, y0+h) x [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let [n, c, ih, iw] = self.shape;
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::dim(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds {ih}x{iw}"
            )));
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for nc in 0..n * c {
            for y in 0..h {
                let row = (nc * ih + y0 + y) * iw + x0;
                out.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Ok(Self::raw([n, c, h, w], out))
    }

    /// Selects batch item `n` as a 1-item tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let len = self.len() / self.n();
        Self::raw(
            [1, self.c(), self.h(), self.w()],
            self.data[n * len..(n + 1) * len].to_vec(),
        )
    }

    /// Stacks 1-item tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("stack of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.c() != c || t.h() != h || t.w() != w {
                return Err(Error::dim(format!(
                    "stack: {:?} incompatible with {:?}",
                    t.shape, first.shape
                )));
            }
            n += t.n();
            data.extend_from_slice(&t.data);
        }
        Ok(Self::raw([n, c, h, w], data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_non_finite() {
        assert!(matches!(
            Tensor::new([1, 1, 2, 2], vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new([1, 1, 1, 2], vec![0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut rng = rand::thread_rng();
        let t = Tensor::uniform([2, 5, 3, 4], -1.0, 1.0, &mut rng);
        let a = t.slice_channels(0, 2).unwrap();
        let b = t.slice_channels(2, 3).unwrap();
        assert_eq!(Tensor::concat_channels(&[&a, &b]).unwrap(), t);
    }

    #[test]
    fn crop_picks_window() {
        let t = Tensor::new([1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let c = t.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
    }
}
