//! Dense 2-D numeric arrays.
//!
//! Everything in this crate runs on row-major `f64` matrices; vectors are
//! stored as `n x 1` columns. The sizes involved are tiny (widths up to a few
//! hundred), so the implementation favours clarity and determinism over
//! throughput: no blocking, no SIMD, fixed accumulation order.

use std::fmt;

/// Errors raised by array construction and matrix algebra.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Data length does not match the requested shape.
    InvalidShape { rows: usize, cols: usize, len: usize },
    /// A square matrix was required.
    NotSquare { rows: usize, cols: usize },
    /// Matrix inversion failed or the condition estimate exceeded the limit.
    Singular { condition: f64 },
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A value that must be finite was not.
    NonFinite { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::InvalidShape { rows, cols, len } => {
                write!(f, "shape {rows}x{cols} does not hold {len} values")
            }
            TensorError::NotSquare { rows, cols } => {
                write!(f, "square matrix required, got {rows}x{cols}")
            }
            TensorError::Singular { condition } => {
                write!(f, "matrix is singular or ill-conditioned (condition estimate {condition:e})")
            }
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumArray {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl NumArray {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::InvalidShape { rows, cols, len: data.len() });
        }
        Ok(NumArray { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        NumArray { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        NumArray { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut out = NumArray::zeros(n, n);
        for i in 0..n {
            out.data[i * n + i] = 1.0;
        }
        out
    }

    /// Column vector `n x 1`.
    pub fn col(values: Vec<f64>) -> Self {
        let rows = values.len();
        NumArray { rows, cols: 1, data: values }
    }

    /// 1x1 array.
    pub fn scalar(value: f64) -> Self {
        NumArray { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        NumArray { rows, cols, data }
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

    pub fn shape_vec(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &NumArray) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn shape_err(&self, other: &NumArray, op: &'static str) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.shape_vec(),
            right: other.shape_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NumArray {
        NumArray {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &NumArray, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<NumArray, TensorError> {
        if !self.same_shape(other) {
            return Err(self.shape_err(other, op));
        }
        Ok(NumArray {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &NumArray) -> Result<NumArray, TensorError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &NumArray) -> Result<NumArray, TensorError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &NumArray) -> Result<NumArray, TensorError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> NumArray {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> NumArray {
        self.map(|v| v + c)
    }

    /// In-place `self += other * c`.
    pub fn axpy(&mut self, c: f64, other: &NumArray) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn transpose(&self) -> NumArray {
        let mut out = NumArray::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &NumArray) -> Result<NumArray, TensorError> {
        if self.cols != other.rows {
            return Err(self.shape_err(other, "matmul"));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = NumArray::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Sum of squared entries.
    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_sum().sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.l2_norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &NumArray) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn dot(&self, other: &NumArray) -> Result<f64, TensorError> {
        if !self.same_shape(other) {
            return Err(self.shape_err(other, "dot"));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Copy of rows `r0..r1`.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> NumArray {
        debug_assert!(r0 <= r1 && r1 <= self.rows);
        NumArray {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Vertical concatenation; all parts must share the column count.
    pub fn stack_rows(parts: &[NumArray]) -> Result<NumArray, TensorError> {
        let cols = parts.first().map(|p| p.cols).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![rows, cols],
                    right: p.shape_vec(),
                });
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(NumArray { rows, cols, data })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // log(1 + e^x), stable for both tails.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softplus_inv(y: f64) -> f64 {
    // Inverse of softplus for y > 0: log(e^y - 1).
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = NumArray::identity(2);
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(out, i2);
    }

    #[test]
    fn matmul_hand_value() {
        let a = NumArray::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = NumArray::new(2, 1, vec![0.0, 1.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_col_is_dot() {
        let a = NumArray::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = NumArray::new(4, 1, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert!(out.is_scalar());
        assert_eq!(out.scalar_value(), 5.0 + 12.0 + 21.0 + 32.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = NumArray::zeros(2, 3);
        let b = NumArray::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn transpose_round_trip() {
        let a = NumArray::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for &y in &[1e-4, 0.01, 0.5, 3.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() < 1e-12 * y.max(1.0), "y={y}");
        }
    }

    #[test]
    fn stack_and_slice_rows() {
        let a = NumArray::new(1, 2, vec![1.0, 2.0]).unwrap();
        let b = NumArray::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = NumArray::stack_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), (3, 2));
        assert_eq!(s.slice_rows(0, 1), a);
        assert_eq!(s.slice_rows(1, 3), b);
    }
}
