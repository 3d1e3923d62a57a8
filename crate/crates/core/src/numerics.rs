//! Dense row-major matrices and the scalar activations shared by the cells.
//!
//! Everything here is `f64`. Matrices are small (at most 32x32 in practice),
//! so there is no blocking or SIMD; the crate-private `*_acc` kernels exist so
//! the recurrent passes can accumulate into preallocated buffers without
//! allocating per time step.

use crate::error::{Error, Result};

/// Dense real matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("from_vec", (rows, cols), (data.len(), 1)));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(idx));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", (rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Row vector from a slice.
    pub fn row(values: &[f64]) -> Self {
        Matrix { rows: 1, cols: values.len(), data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Column `c` copied out as a vector.
    pub fn col_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Largest absolute entry-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        let d = self.zip_with("max_abs_diff", other, |a, b| (a - b).abs())?;
        Ok(d.data.iter().copied().fold(0.0, f64::max))
    }

    fn zip_with(&self, op: &'static str, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.data[i * a.cols..(i + 1) * a.cols].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * b.cols..(p + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// Entry-wise (Hadamard) product.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.zip_with("hadamard", b, |x, y| x * y)
}

/// `u * v^T` for two vectors given as slices.
pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    ger_acc(&mut m, u, v);
    m
}

/// Logistic function, evaluated with a sign split so `exp` never overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh_act(x: f64) -> f64 {
    x.tanh()
}

/// Sigmoid slope expressed through the activated output `y = sigmoid(x)`.
pub fn dsigmoid_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}

/// Tanh slope expressed through the activated output `y = tanh(x)`.
pub fn dtanh_from_output(y: f64) -> f64 {
    1.0 - y * y
}

/// Column SoftMax with the maximum subtracted before exponentiation.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// Four independent partial sums so the loop can use packed arithmetic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// out += A x
pub(crate) fn gemv_acc(out: &mut [f64], a: &Matrix, x: &[f64]) {
    debug_assert_eq!(a.cols, x.len());
    debug_assert_eq!(a.rows, out.len());
    for (o, row) in out.iter_mut().zip(a.data.chunks_exact(a.cols)) {
        *o += dot(row, x);
    }
}

// out += A^T x
pub(crate) fn gemv_t_acc(out: &mut [f64], a: &Matrix, x: &[f64]) {
    debug_assert_eq!(a.rows, x.len());
    debug_assert_eq!(a.cols, out.len());
    for (&xi, row) in x.iter().zip(a.data.chunks_exact(a.cols)) {
        if xi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * xi;
        }
    }
}

// A += u v^T
pub(crate) fn ger_acc(a: &mut Matrix, u: &[f64], v: &[f64]) {
    debug_assert_eq!(a.rows, u.len());
    debug_assert_eq!(a.cols, v.len());
    let cols = a.cols;
    for (&ui, row) in u.iter().zip(a.data.chunks_exact_mut(cols)) {
        if ui == 0.0 {
            continue;
        }
        for (w, &vj) in row.iter_mut().zip(v) {
            *w += ui * vj;
        }
    }
}
