//! Dense row-major f64 matrices.
//!
//! Everything the fusion model computes runs on these. Shapes are `[rows, cols]`;
//! a row vector is `[1, c]` and a scalar is `[1, 1]`.

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Tensor { rows: 1, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Stack row slices into a matrix. All rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { rows: rows.len(), cols, data }
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Scalar content of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self [n,p] * other [p,q] -> [n,q]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let (n, p, q) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, q);
        for i in 0..n {
            let a_row = &self.data[i * p..(i + 1) * p];
            let o_row = &mut out.data[i * q..(i + 1) * q];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * q..(kk + 1) * q];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self [n,p] * other^T [q,p] -> [n,q]` without materialising the transpose.
    pub fn matmul_bt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_bt shape mismatch");
        let (n, p, q) = (self.rows, self.cols, other.rows);
        let mut out = Tensor::zeros(n, q);
        for i in 0..n {
            let a_row = &self.data[i * p..(i + 1) * p];
            for j in 0..q {
                let b_row = &other.data[j * p..(j + 1) * p];
                let mut acc = 0.0;
                for kk in 0..p {
                    acc += a_row[kk] * b_row[kk];
                }
                out.data[i * q + j] = acc;
            }
        }
        out
    }

    /// `self^T [p,n] * other [p,q] -> [n,q]` without materialising the transpose.
    pub fn matmul_at(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_at shape mismatch");
        let (p, n, q) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, q);
        for kk in 0..p {
            let a_row = &self.data[kk * n..(kk + 1) * n];
            let b_row = &other.data[kk * q..(kk + 1) * q];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * q..(i + 1) * q];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor { rows: self.rows, cols: self.cols, data }
    }

    /// Add a `[1, c]` row vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        assert_eq!(row.rows, 1, "add_row expects a row vector");
        assert_eq!(self.cols, row.cols, "add_row width mismatch");
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * s).collect();
        Tensor { rows: self.rows, cols: self.cols, data }
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Tensor { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (o, &b) in self.data.iter_mut().zip(&other.data) {
            *o += b;
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_assign_scaled shape mismatch");
        for (o, &b) in self.data.iter_mut().zip(&other.data) {
            *o += b * s;
        }
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value in {context}")))
        }
    }
}
