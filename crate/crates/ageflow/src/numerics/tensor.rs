//! Dense row-major N-dimensional tensor. The single value carrier for
//! images, latents, and parameters.

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Reinterpret the same flat data under a new shape.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape element count");
        self.shape = shape.to_vec();
        self
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn add_scaled_assign(&mut self, other: &Self, s: F) {
        assert_eq!(self.shape, other.shape, "add_scaled_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * s;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    pub fn sum(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &x| acc + x)
    }

    pub fn mean(&self) -> F {
        self.sum() / F::from_f64(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn dot(&self, other: &Self) -> F {
        assert_eq!(self.shape, other.shape, "dot shape mismatch");
        self.data.iter().zip(&other.data).fold(F::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Convert element type (used by checkpoint load and the verification build).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|&x| G::from_f64(x.as_f64())).collect(),
        )
    }

    // NCHW helpers for the common 4-d case.

    pub fn dim4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    #[inline(always)]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        let (_, cc, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    #[inline(always)]
    pub fn set4(&mut self, n: usize, c: usize, h: usize, w: usize, v: F) {
        let (_, cc, hh, ww) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * hh + h) * ww + w] = v;
    }

    /// Borrow one sample of a [N,...] batch as a flat slice.
    pub fn sample(&self, n: usize) -> &[F] {
        let per: usize = self.shape[1..].iter().product();
        &self.data[n * per..(n + 1) * per]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [F] {
        let per: usize = self.shape[1..].iter().product();
        &mut self.data[n * per..(n + 1) * per]
    }
}

/// Concatenate along the channel axis of [N,C,H,W] tensors.
pub fn concat_channels<F: Scalar>(parts: &[&Tensor<F>]) -> Tensor<F> {
    assert!(!parts.is_empty());
    let (n, _, h, w) = parts[0].dim4();
    let c_total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    for p in parts {
        let (pn, _, ph, pw) = p.dim4();
        assert!(pn == n && ph == h && pw == w, "concat_channels spatial mismatch");
    }
    let mut out = Tensor::zeros(&[n, c_total, h, w]);
    let plane = h * w;
    for ni in 0..n {
        let mut c_off = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = p.sample(ni);
            let dst = out.sample_mut(ni);
            dst[c_off * plane..(c_off + pc) * plane].copy_from_slice(src);
            c_off += pc;
        }
    }
    out
}

/// Split a [N,C,H,W] tensor at channel index `c_split` into (front, back).
pub fn split_channels<F: Scalar>(x: &Tensor<F>, c_split: usize) -> (Tensor<F>, Tensor<F>) {
    let (n, c, h, w) = x.dim4();
    assert!(c_split <= c, "split_channels index out of range");
    let plane = h * w;
    let mut a = Tensor::zeros(&[n, c_split, h, w]);
    let mut b = Tensor::zeros(&[n, c - c_split, h, w]);
    for ni in 0..n {
        let src = x.sample(ni);
        a.sample_mut(ni).copy_from_slice(&src[..c_split * plane]);
        b.sample_mut(ni).copy_from_slice(&src[c_split * plane..]);
    }
    (a, b)
}

/// Gather a channel subset (by index list) of a [N,C,H,W] tensor.
pub fn gather_channels<F: Scalar>(x: &Tensor<F>, idx: &[usize]) -> Tensor<F> {
    let (n, _, h, w) = x.dim4();
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, idx.len(), h, w]);
    for ni in 0..n {
        let src = x.sample(ni);
        let dst = out.sample_mut(ni);
        for (j, &c) in idx.iter().enumerate() {
            dst[j * plane..(j + 1) * plane].copy_from_slice(&src[c * plane..(c + 1) * plane]);
        }
    }
    out
}

/// Scatter channels back into positions `idx` of a [N,C,H,W] tensor.
pub fn scatter_channels<F: Scalar>(dst: &mut Tensor<F>, idx: &[usize], src: &Tensor<F>) {
    let (n, _, h, w) = dst.dim4();
    assert_eq!(src.shape()[1], idx.len());
    let plane = h * w;
    for ni in 0..n {
        let s = src.sample(ni).to_vec();
        let d = dst.sample_mut(ni);
        for (j, &c) in idx.iter().enumerate() {
            d[c * plane..(c + 1) * plane].copy_from_slice(&s[j * plane..(j + 1) * plane]);
        }
    }
}
