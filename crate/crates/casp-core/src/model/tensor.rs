//! Dense f32 tensor storage matching the on-disk payload exactly.

use crate::error::{CaspError, Result};
use crate::linalg::Mat;

/// Row-major 2-D tensor of f32 values. Checkpoints store f32 payloads, so
/// keeping the in-memory representation in f32 makes save/load round-trips
/// the identity; numerical work widens to f64 via [`Tensor::to_mat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CaspError::invalid(format!(
                "tensor dims {rows}x{cols} do not match {} elements",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Widen to an f64 matrix for numerical work.
    pub fn to_mat(&self) -> Mat {
        Mat::from_fn(self.rows, self.cols, |r, c| {
            f64::from(self.data[r * self.cols + c])
        })
    }

    /// Narrow an f64 matrix to f32 storage.
    pub fn from_mat(m: &Mat) -> Self {
        let (rows, cols) = (m.nrows(), m.ncols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)] as f32);
            }
        }
        Tensor { rows, cols, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_mat() {
        let t = Tensor::new(2, 3, vec![1.0, 2.5, -0.25, 0.0, 7.0, -1.5]).unwrap();
        let back = Tensor::from_mat(&t.to_mat());
        assert_eq!(t, back);
    }

    #[test]
    fn dim_mismatch_rejected() {
        assert!(Tensor::new(2, 2, vec![1.0; 3]).is_err());
    }
}
