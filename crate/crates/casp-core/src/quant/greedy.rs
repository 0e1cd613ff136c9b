//! Data-aware greedy quantization.
//!
//! Weights are quantized sequentially along the calibration-coupled axis
//! (rows of the stored matrix, since the layer computes `X * W`), with each
//! row's residual error propagated into the not-yet-quantized rows through
//! the damped Gram matrix of the calibration activations. Grids are the same
//! per-group min-max grids as RTN, fitted lazily from the current
//! (compensated) values when a group is first reached, so a diagonal Gram
//! matrix reduces the scheme to plain RTN exactly.

use crate::error::{CaspError, Result};
use crate::linalg::Mat;
use crate::model::tensor::Tensor;
use crate::quant::rtn::{quantize_value, SUPPORTED_BITS};
use crate::quant::{grid_for_group, GridParams, QuantScheme, QuantizedTensor};
use nalgebra::linalg::Cholesky;

/// Damping ladder used for near-singular Gram matrices, as multiples of
/// `trace(H)/d`.
const DAMPING_LADDER: [f64; 3] = [0.0, 1e-6, 1e-4];

pub fn quantize_greedy(
    w: &Tensor,
    acts: &Mat,
    n_bits: u8,
    group_size: u32,
) -> Result<QuantizedTensor> {
    if !SUPPORTED_BITS.contains(&n_bits) {
        return Err(CaspError::invalid(format!(
            "n_bits {n_bits} not in {{2,3,4,8}}"
        )));
    }
    if group_size == 0 {
        return Err(CaspError::invalid("group_size must be positive"));
    }
    if acts.nrows() == 0 || acts.ncols() != w.rows() {
        return Err(CaspError::invalid(format!(
            "activations {}x{} not conformable with weight rows {}",
            acts.nrows(),
            acts.ncols(),
            w.rows()
        )));
    }
    if acts.iter().all(|&v| v == 0.0) {
        return Err(CaspError::invalid("degenerate calibration"));
    }
    if !w.is_finite() || !crate::linalg::all_finite(acts) {
        return Err(CaspError::invalid("non-finite input"));
    }

    let d = w.rows();
    let cols = w.cols();
    let gram = acts.transpose() * acts;
    let trace: f64 = gram.diagonal().iter().sum();
    let mut chol = None;
    for &mult in &DAMPING_LADDER {
        let eps = mult * trace / d as f64;
        let damped = &gram + Mat::identity(d, d) * eps;
        if let Some(c) = Cholesky::new(damped) {
            chol = Some(c);
            break;
        }
    }
    let chol = chol.ok_or_else(|| {
        CaspError::numerical(format!(
            "singular Gram matrix after damping ladder {DAMPING_LADDER:?} (x trace/d)"
        ))
    })?;
    // Lower Cholesky factor of H^{-1}; its column i encodes the error
    // propagation weights for step i.
    let inv = chol.inverse();
    let l = Cholesky::new(inv)
        .ok_or_else(|| CaspError::numerical("inverse Gram is not positive definite"))?
        .l();

    let g = group_size as usize;
    let mut work = w.to_mat();
    let n_groups = (d * cols).div_ceil(g);
    let mut grids: Vec<Option<GridParams>> = vec![None; n_groups];
    let mut indices = vec![0u32; d * cols];
    let mut group_vals = Vec::with_capacity(g);
    let mut row_buf = Vec::with_capacity(cols);

    for i in 0..d {
        let row_start = i * cols;
        // Fit grids for any group that begins in this row.
        let first_grp = row_start / g;
        let last_grp = (row_start + cols - 1) / g;
        for grp in first_grp..=last_grp {
            if grids[grp].is_some() {
                continue;
            }
            group_vals.clear();
            let lo = grp * g;
            let hi = ((grp + 1) * g).min(d * cols);
            for flat in lo..hi {
                group_vals.push(work[(flat / cols, flat % cols)]);
            }
            grids[grp] = Some(grid_for_group(&group_vals, n_bits));
        }

        // Quantize row i against its groups' grids.
        row_buf.clear();
        for c in 0..cols {
            let grid = grids[(row_start + c) / g].unwrap();
            let idx = quantize_value(work[(i, c)], grid, n_bits);
            indices[row_start + c] = idx;
            let deq = grid.zero() + grid.scale() * f64::from(idx);
            row_buf.push(work[(i, c)] - deq);
        }

        // Propagate the scaled residual into the remaining rows.
        let diag = l[(i, i)];
        for j in (i + 1)..d {
            let coef = l[(j, i)] / diag;
            if coef == 0.0 {
                continue;
            }
            for (c, &e) in row_buf.iter().enumerate() {
                work[(j, c)] -= coef * e;
            }
        }
    }

    let mut scales = Vec::with_capacity(n_groups);
    let mut zeros = Vec::with_capacity(n_groups);
    for grid in grids {
        let grid = grid.unwrap();
        scales.push(grid.scale_bits);
        zeros.push(grid.zero_bits);
    }

    Ok(QuantizedTensor {
        scheme: QuantScheme::Greedy,
        n_bits,
        group_size,
        rows: d as u32,
        cols: cols as u32,
        indices,
        scales,
        zeros,
        codebook: None,
    })
}

/// Layer-wise reconstruction objective `||X W - X W_hat||_F`.
pub fn reconstruction_error(x: &Mat, w: &Mat, w_hat: &Mat) -> f64 {
    (x * (w - w_hat)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize_rtn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tensor(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                v as f32
            })
            .collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    /// Calibration matrix with strongly correlated columns.
    fn correlated_acts(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Mat {
        let base = Mat::from_fn(n, 1, |_, _| StandardNormal.sample(rng));
        Mat::from_fn(n, d, |r, c| {
            let noise: f64 = StandardNormal.sample(rng);
            base[(r, 0)] * (1.0 + c as f64 / d as f64) + 0.1 * noise
        })
    }

    #[test]
    fn diagonal_gram_reduces_to_rtn() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let w = random_tensor(&mut rng, 8, 8);
        // One-hot rows: X^T X is the identity, so no error propagation.
        let x = Mat::identity(8, 8);
        let q_greedy = quantize_greedy(&w, &x, 2, 8).unwrap();
        let q_rtn = quantize_rtn(&w, 2, 8).unwrap();
        assert_eq!(q_greedy.indices, q_rtn.indices);
        assert_eq!(q_greedy.scales, q_rtn.scales);
        assert_eq!(q_greedy.zeros, q_rtn.zeros);
    }

    #[test]
    fn beats_rtn_on_correlated_instance_seed17() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let w = random_tensor(&mut rng, 16, 16);
        let x = correlated_acts(&mut rng, 64, 16);
        let wm = w.to_mat();
        let greedy = quantize_greedy(&w, &x, 2, 16).unwrap();
        let rtn = quantize_rtn(&w, 2, 16).unwrap();
        let e_greedy = reconstruction_error(&x, &wm, &dequantize(&greedy).unwrap().to_mat());
        let e_rtn = reconstruction_error(&x, &wm, &dequantize(&rtn).unwrap().to_mat());
        assert!(
            e_greedy <= e_rtn,
            "greedy {e_greedy} should not exceed rtn {e_rtn}"
        );
    }

    #[test]
    fn zero_activations_rejected() {
        let w = Tensor::new(4, 4, vec![0.5; 16]).unwrap();
        let x = Mat::zeros(8, 4);
        let err = quantize_greedy(&w, &x, 2, 4).unwrap_err();
        assert!(err.to_string().contains("degenerate calibration"));
    }

    #[test]
    fn deterministic_given_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let w = random_tensor(&mut rng, 12, 12);
        let x = correlated_acts(&mut rng, 48, 12);
        let a = quantize_greedy(&w, &x, 3, 32).unwrap();
        let b = quantize_greedy(&w, &x, 3, 32).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.scales, b.scales);
    }
}
