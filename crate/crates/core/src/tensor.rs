//! Dense row-major `f64` tensors and the value-level linear algebra behind
//! the autodiff primitives.

use std::fmt;

use crate::error::{Error, Result};
use crate::parallel;

/// Dense n-dimensional array of 64-bit floats in row-major order.
///
/// Matrix routines require exactly two dimensions; scalars on the tape are
/// `1 x 1` matrices.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 32 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// `rows x cols` matrix; panics when the length is wrong.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols}");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::matrix(r, c, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::matrix(1, 1, vec![v])
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

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn dims2(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = self.dims2();
        let (k2, m) = other.dims2();
        assert_eq!(k, k2, "matmul {:?} x {:?}", self.shape, other.shape);
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; n * m];
        parallel::rows_mut(&mut out, m, n * k * m, |i, row| {
            let ai = &a[i * k..(i + 1) * k];
            for (p, &aik) in ai.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let bp = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(bp) {
                    *o += aik * bv;
                }
            }
        });
        Tensor::matrix(n, m, out)
    }

    /// `selfᵀ * other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, n) = self.dims2();
        let (k2, m) = other.dims2();
        assert_eq!(k, k2, "matmul_tn {:?} x {:?}", self.shape, other.shape);
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; n * m];
        parallel::rows_mut(&mut out, m, n * k * m, |i, row| {
            for p in 0..k {
                let api = a[p * n + i];
                if api == 0.0 {
                    continue;
                }
                let bp = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(bp) {
                    *o += api * bv;
                }
            }
        });
        Tensor::matrix(n, m, out)
    }

    /// `self * otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (n, k) = self.dims2();
        let (m, k2) = other.dims2();
        assert_eq!(k, k2, "matmul_nt {:?} x {:?}", self.shape, other.shape);
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; n * m];
        parallel::rows_mut(&mut out, m, n * k * m, |i, row| {
            let ai = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                *o = dot(ai, &b[j * k..(j + 1) * k]);
            }
        });
        Tensor::matrix(n, m, out)
    }

    /// Lower Cholesky factor `L` with `self = L Lᵀ`. Only the lower triangle
    /// of `self` is read.
    pub fn cholesky(&self) -> Result<Tensor> {
        let (n, m) = self.dims2();
        if n != m {
            return Err(Error::ShapeMismatch(format!(
                "cholesky needs a square matrix, got {n}x{m}"
            )));
        }
        let a = &self.data;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s = a[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Tensor::matrix(n, n, l))
    }

    /// `L⁻¹ B` for lower-triangular `L = self`.
    pub fn solve_lower(&self, b: &Tensor) -> Tensor {
        let n = self.rows();
        let (bn, m) = b.dims2();
        assert_eq!(n, bn, "solve_lower {:?} \\ {:?}", self.shape, b.shape);
        let l = &self.data;
        let mut x = b.data.clone();
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let lik = l[i * n + k];
                if lik == 0.0 {
                    continue;
                }
                for (v, &xk) in xi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                    *v -= lik * xk;
                }
            }
            let d = l[i * n + i];
            for v in xi.iter_mut() {
                *v /= d;
            }
        }
        Tensor::matrix(n, m, x)
    }

    /// `L⁻ᵀ B` for lower-triangular `L = self`.
    pub fn solve_lower_t(&self, b: &Tensor) -> Tensor {
        let n = self.rows();
        let (bn, m) = b.dims2();
        assert_eq!(n, bn, "solve_lower_t {:?} \\ {:?}", self.shape, b.shape);
        let l = &self.data;
        let mut x = b.data.clone();
        for i in (0..n).rev() {
            let (head, done) = x.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let lki = l[k * n + i];
                if lki == 0.0 {
                    continue;
                }
                let xk = &done[(k - i - 1) * m..(k - i) * m];
                for (v, &w) in xi.iter_mut().zip(xk) {
                    *v -= lki * w;
                }
            }
            let d = l[i * n + i];
            for v in xi.iter_mut() {
                *v /= d;
            }
        }
        Tensor::matrix(n, m, x)
    }

    /// Lower triangle (diagonal included), upper part zeroed.
    pub fn tril(&self) -> Tensor {
        let (n, m) = self.dims2();
        let mut out = self.clone();
        for i in 0..n {
            for j in i + 1..m {
                out.data[i * m + j] = 0.0;
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let (n, m) = self.dims2();
        (0..n.min(m)).map(|i| self.data[i * m + i]).collect()
    }

    pub fn add_diagonal(&self, v: f64) -> Tensor {
        let (n, m) = self.dims2();
        let mut out = self.clone();
        for i in 0..n.min(m) {
            out.data[i * m + i] += v;
        }
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
