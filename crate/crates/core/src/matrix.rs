//! Dense row-major `f32` matrices with `f64` accumulation.
//!
//! Only what the attention pipeline needs: products, row renormalization and
//! row-stochasticity checks. Products are computed row by row with a fixed
//! ascending summation order, so the result is identical whatever the number
//! of rayon workers.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// `self · rhs`, accumulated in `f64` and rounded once per entry.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let inner = self.cols;
        let out_cols = rhs.cols;
        let mut out = Matrix::zeros(self.rows, out_cols);
        if out_cols == 0 {
            return Ok(out);
        }
        out.data
            .par_chunks_mut(out_cols)
            .enumerate()
            .for_each_init(
                || vec![0f64; out_cols],
                |acc, (i, out_row)| {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    let lhs_row = &self.data[i * inner..(i + 1) * inner];
                    for (k, &a) in lhs_row.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let a = f64::from(a);
                        let rhs_row = &rhs.data[k * out_cols..(k + 1) * out_cols];
                        for (dst, &b) in acc.iter_mut().zip(rhs_row) {
                            *dst += a * f64::from(b);
                        }
                    }
                    for (dst, &v) in out_row.iter_mut().zip(acc.iter()) {
                        *dst = v as f32;
                    }
                },
            );
        Ok(out)
    }

    /// Rescales every row to sum to one. Rows whose sum is below `floor`
    /// become uniform.
    pub fn renormalize_rows(&mut self, floor: f64) {
        let cols = self.cols;
        if cols == 0 {
            return;
        }
        for row in self.data.chunks_mut(cols) {
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if sum < floor {
                row.fill(1.0 / cols as f32);
            } else {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / sum) as f32;
                }
            }
        }
    }

    /// Largest deviation of a row sum from one, and the row it occurs on.
    pub fn max_row_deviation(&self) -> (usize, f64) {
        let mut worst = (0, 0.0);
        if self.cols == 0 {
            return worst;
        }
        for (i, row) in self.data.chunks(self.cols).enumerate() {
            let dev = (row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs();
            if dev > worst.1 {
                worst = (i, dev);
            }
        }
        worst
    }

    pub fn is_row_stochastic(&self, tolerance: f64) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
            && self.max_row_deviation().1 <= tolerance
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max)
    }
}
