//! Row-major dense matrices and vectors with the handful of contractions the
//! lab needs. No BLAS; the loops below are blocked just enough to vectorize.
//!
//! Summation order is fixed (8-lane blocked accumulation), so every operation
//! is deterministic for identical inputs.

use std::ops::{Index, IndexMut};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dims must be >= 1");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// `self = scale * src`, reusing this matrix's storage.
    pub fn assign_scaled(&mut self, src: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (src.rows, src.cols));
        for (dst, &s) in self.data.iter_mut().zip(&src.data) {
            *dst = scale * s;
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (dst, &s) in self.data.iter_mut().zip(&other.data) {
            *dst += scale * s;
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for v in &mut self.data {
            *v *= scale;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    pub data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn norm(&self) -> f64 {
        euclidean_norm(&self.data)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &self.data_of(other))
    }

    fn data_of<'a>(&self, other: &'a Vector) -> &'a [f64] {
        assert_eq!(self.dim(), other.dim(), "vector dims must match");
        &other.data
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &Vector) -> Vector {
        let o = self.data_of(other);
        Vector {
            data: self.data.iter().zip(o).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Vector, scale: f64) {
        let dim = self.dim();
        assert_eq!(dim, other.dim());
        for (dst, &s) in self.data.iter_mut().zip(&other.data) {
            *dst += scale * s;
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for v in &mut self.data {
            *v *= scale;
        }
    }

    pub fn scaled(&self, scale: f64) -> Vector {
        let mut out = self.clone();
        out.scale(scale);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

impl Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

const LANES: usize = 8;

/// Blocked dot product. The 8-lane accumulation gives the compiler room to
/// vectorize without changing the result between calls.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f64>() + tail
}

pub fn euclidean_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(dst: &mut [f64], scale: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// `m * x`.
pub fn matvec(m: &Matrix, x: &Vector) -> Vector {
    assert_eq!(m.cols, x.dim(), "matvec: dim mismatch");
    let mut out = vec![0.0; m.rows];
    for (o, row) in out.iter_mut().zip(m.data.chunks_exact(m.cols)) {
        *o = dot(row, &x.data);
    }
    Vector { data: out }
}

/// `m^T * y`, streaming the matrix row-wise.
pub fn transpose_matvec(m: &Matrix, y: &Vector) -> Vector {
    assert_eq!(m.rows, y.dim(), "transpose_matvec: dim mismatch");
    let mut out = vec![0.0; m.cols];
    for (row, &yi) in m.data.chunks_exact(m.cols).zip(&y.data) {
        axpy(&mut out, yi, row);
    }
    Vector { data: out }
}

/// `a * b`.
pub fn matmat(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmat: dim mismatch");
    let mut out = Matrix::zeros(a.rows, b.cols);
    let c = b.cols;
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * c..(i + 1) * c];
        for (k, &aik) in arow.iter().enumerate() {
            axpy(orow, aik, &b.data[k * c..(k + 1) * c]);
        }
    }
    out
}

/// `m^T * b`; used by the batched backward pass.
pub fn transpose_matmat(m: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(m.rows, b.rows, "transpose_matmat: dim mismatch");
    let c = b.cols;
    let mut out = Matrix::zeros(m.cols, c);
    for i in 0..m.rows {
        let mrow = m.row(i);
        let brow = &b.data[i * c..(i + 1) * c];
        for (j, &mij) in mrow.iter().enumerate() {
            axpy(&mut out.data[j * c..(j + 1) * c], mij, brow);
        }
    }
    out
}

/// `u ⊗ v` (rank-1 matrix, `out[i][j] = u[i] * v[j]`).
pub fn outer_product(u: &Vector, v: &Vector) -> Matrix {
    let mut out = Matrix::zeros(u.dim(), v.dim());
    for (i, &ui) in u.data.iter().enumerate() {
        let row = &mut out.data[i * v.dim()..(i + 1) * v.dim()];
        for (o, &vj) in row.iter_mut().zip(&v.data) {
            *o = ui * vj;
        }
    }
    out
}

/// `g += scale * u * v^T` where `u` is `r x B` and `v` is `c x B`.
/// Accumulates a batch of outer products in one pass over `g`.
pub fn accumulate_outer_batch(g: &mut Matrix, u: &Matrix, v: &Matrix, scale: f64) {
    assert_eq!(u.cols, v.cols, "accumulate_outer_batch: batch mismatch");
    assert_eq!((g.rows, g.cols), (u.rows, v.rows));
    let b = u.cols;
    for i in 0..u.rows {
        let urow = u.row(i);
        let grow = &mut g.data[i * v.rows..(i + 1) * v.rows];
        for (j, gij) in grow.iter_mut().enumerate() {
            *gij += scale * dot(urow, &v.data[j * b..(j + 1) * b]);
        }
    }
}
