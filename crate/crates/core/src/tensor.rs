//! Dense row-major `f64` tensors.
//!
//! Only the handful of operations the models and diagnostics need are
//! provided; matrix products go through `matrixmultiply`, with transposes
//! expressed as strides rather than copies.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        if self.data.len() > PREVIEW {
            write!(f, "{head:?}..")
        } else {
            write!(f, "{head:?}")
        }
    }
}

/// Whether an operand of [`Tensor::matmul_t`] is used as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    /// Builds an `n×m` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n * m);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != m {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {m}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![n, m],
            data,
        })
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Width of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols().max(1))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(Trans::No, other, Trans::No)
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, ta: Trans, other: &Self, tb: Trans) -> Result<Self> {
        let (ar, ac) = self.dims2()?;
        let (br, bc) = other.dims2()?;
        let (m, k, rsa, csa) = match ta {
            Trans::No => (ar, ac, ac as isize, 1),
            Trans::Yes => (ac, ar, 1, ac as isize),
        };
        let (k2, n, rsb, csb) = match tb {
            Trans::No => (br, bc, bc as isize, 1),
            Trans::Yes => (bc, br, 1, bc as isize),
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: vec![m, k],
                actual: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: strides and extents describe exactly the buffers above.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    other.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Self::new(vec![m, n], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return f64::NAN;
        }
        self.sum() / self.data.len() as f64
    }

    /// Per-column means of an `n×m` matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows();
        let mut acc = vec![0.0; self.cols()];
        for r in self.row_iter() {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }

    pub fn trace(&self) -> Result<f64> {
        let (r, c) = self.dims2()?;
        if r != c {
            return Err(Error::invalid("trace of a non-square matrix"));
        }
        Ok((0..r).map(|i| self.data[i * c + i]).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    /// Concatenates two matrices with equal row counts side by side.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        let (r, a) = self.dims2()?;
        let (r2, b) = other.dims2()?;
        if r != r2 {
            return Err(Error::ShapeMismatch {
                op: "hcat",
                expected: vec![r, b],
                actual: vec![r2, b],
            });
        }
        let mut data = Vec::with_capacity(r * (a + b));
        for i in 0..r {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Self::new(vec![r, a + b], data)
    }

    /// Splits columns `[0, at)` and `[at, cols)` of a matrix.
    pub fn split_cols(&self, at: usize) -> Result<(Self, Self)> {
        let (r, c) = self.dims2()?;
        if at > c {
            return Err(Error::invalid(format!("split at {at} beyond {c} columns")));
        }
        let mut left = Vec::with_capacity(r * at);
        let mut right = Vec::with_capacity(r * (c - at));
        for row in self.row_iter() {
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        Ok((Self::new(vec![r, at], left)?, Self::new(vec![r, c - at], right)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let s = Tensor::new(vec![], vec![4.0]).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn matmul_transposes_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let direct = a.matmul_t(Trans::Yes, &b, Trans::No).unwrap();
        let explicit = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(direct, explicit);
        assert_eq!(direct.shape(), &[3, 4]);

        let c = b.matmul_t(Trans::Yes, &b, Trans::No).unwrap();
        let d = b.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(c, d);
        let e = a.matmul_t(Trans::No, &a, Trans::Yes).unwrap();
        assert_eq!(e.data(), &[14., 32., 32., 77.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            a.matmul(&a),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn split_and_hcat_invert() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let (l, r) = a.split_cols(1).unwrap();
        assert_eq!(l.data(), &[1., 4.]);
        assert_eq!(l.hcat(&r).unwrap(), a);
    }
}
