//! Dense row-major `f64` tensors and the raw kernels the tape is built on.
//!
//! Everything here is value-level: no gradient bookkeeping. Matrix kernels
//! are written in i-k-j order so the inner loop runs over contiguous rows of
//! the output; the summation order for each output element is the plain
//! ascending-k order, which keeps results bit-identical between builds that
//! vectorize differently.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
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
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(alloc::format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(alloc::format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(
            &[rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&s| s == 0) {
            return Err(Error::shape(alloc::format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(Error::shape("transpose expects a matrix"));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        Ok(Tensor {
            shape: vec![n, m],
            data: transpose(&self.data, m, n),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(alloc::format!(
                "add {:?} vs {:?}",
                self.shape,
                other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims()?;
        let (k2, p) = other.matrix_dims()?;
        if k != k2 {
            return Err(Error::shape(alloc::format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape,
                other.shape
            )));
        }
        Ok(Tensor {
            shape: vec![m, p],
            data: matmul_nn(&self.data, &other.data, m, k, p),
        })
    }

    pub(crate) fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(alloc::format!(
                "expected a matrix, got shape {s:?}"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// kernels

/// `a[m×k] · b[k×p]`. Rows of `a` are taken four at a time so each row of
/// `b` is loaded once per block; every output still sums over `k` in order.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    let blocks = m / 4;
    for (bi, cblock) in c.chunks_exact_mut(4 * p).take(blocks).enumerate() {
        let i = bi * 4;
        let (c0, rest) = cblock.split_at_mut(p);
        let (c1, rest) = rest.split_at_mut(p);
        let (c2, c3) = rest.split_at_mut(p);
        for t in 0..k {
            let brow = &b[t * p..(t + 1) * p];
            let (a0, a1, a2, a3) = (
                a[i * k + t],
                a[(i + 1) * k + t],
                a[(i + 2) * k + t],
                a[(i + 3) * k + t],
            );
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 += a0 * bv;
                *x1 += a1 * bv;
                *x2 += a2 * bv;
                *x3 += a3 * bv;
            }
        }
    }
    for i in blocks * 4..m {
        let crow = &mut c[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * p..(t + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m×k]ᵀ · b[m×p]`, accumulated into `out[k×p]`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, p: usize, out: &mut [f64]) {
    for t in 0..m {
        let arow = &a[t * k..(t + 1) * k];
        let brow = &b[t * p..(t + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = libm::exp(v - max);
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Value-level softmax over the last dimension.
pub fn softmax_lastdim_values(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: softmax_rows(&x.data, x.cols()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        assert!(alloc::format!("{err}").contains("inner extents"));
    }

    #[test]
    fn identity_and_zero_products() {
        let x = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&x).unwrap(), x);
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let z = Tensor::zeros(&[2, 1]);
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn tn_kernel_matches_transpose_then_multiply() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let mut out = vec![0.0; 3 * 2];
        matmul_tn_acc(&a, &b, 4, 3, 2, &mut out);
        let at = transpose(&a, 4, 3);
        assert_eq!(out, matmul_nn(&at, &b, 3, 4, 2));
    }
}
