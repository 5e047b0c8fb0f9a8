//! Minimal dense linear algebra for MLP passes and optimizer arithmetic.
//!
//! Everything is 64-bit and row-major. The matrices involved are desk-scale
//! (hundreds by hundreds), so a cache-friendly naive product is all that is
//! needed; there is no BLAS dependency.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from nested rows; rows must all have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Standard matrix product. Errors when the inner dimensions disagree.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    /// `self^T * other` without materializing the transpose (the backward
    /// pass computes activation^T * delta for every layer, so this runs as
    /// rank-1 updates over the shared sample index).
    pub fn matmul_transpose_self(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} (transposed) by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = vec![0.0; self.cols * other.cols];
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(DenseMatrix {
            rows: self.cols,
            cols: other.cols,
            data: out,
        })
    }

    /// `self * other^T`; both operands are walked along contiguous rows.
    pub fn matmul_transpose_other(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul {}x{} by {}x{} (transposed)",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                out.push(a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum());
            }
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: other.rows,
            data: out,
        })
    }

    /// Row-wise softmax with max-subtraction so large logits cannot overflow.
    pub fn row_softmax(&self) -> Result<DenseMatrix> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = out.row_mut(r);
            let mut max = f64::NEG_INFINITY;
            for &v in row.iter() {
                if !v.is_finite() {
                    return Err(Error::Domain(format!("non-finite logit {v}")));
                }
                max = max.max(v);
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(out)
    }
}

/// Flat vector of all model parameters. The packing order is owned by the
/// model (`MlpSpec`); optimizers and the server only ever see this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
}

impl ParamVector {
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_len(&self, other: &ParamVector) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "vector lengths {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> ParamVector {
        ParamVector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// Componentwise product.
    pub fn mul(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        Ok(self.zip_with(other, |a, b| a * b))
    }

    /// Componentwise quotient. An exact-zero divisor entry is rejected;
    /// callers that cannot rule it out must apply [`max_scalar`] first.
    ///
    /// [`max_scalar`]: ParamVector::max_scalar
    pub fn div(&self, other: &ParamVector) -> Result<ParamVector> {
        self.check_len(other)?;
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::Domain("division by exact zero".into()));
        }
        Ok(self.zip_with(other, |a, b| a / b))
    }

    /// Componentwise `max(entry, floor)`.
    pub fn max_scalar(&self, floor: f64) -> ParamVector {
        ParamVector {
            data: self.data.iter().map(|&a| a.max(floor)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector {
            data: self.data.iter().map(|&a| a * c).collect(),
        }
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.check_len(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}
