//! Small linear-algebra helpers shared across modules.

use crate::error::{CaspError, Result};
use nalgebra::DMatrix;

/// Dense f64 matrix used for all numerical work. Checkpoint tensors store
/// f32 and are widened on entry.
pub type Mat = DMatrix<f64>;

/// Thin SVD with singular values sorted descending and a fixed sign
/// convention: the first nonzero element of each left singular vector is
/// non-negative. The convention makes repeated decompositions bit-identical.
pub struct ThinSvd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v_t: Mat,
}

pub fn thin_svd(m: &Mat) -> Result<ThinSvd> {
    // nalgebra's own default convergence tolerance (eps * 5); tighter values
    // degrade the implicit-shift iteration.
    let svd = nalgebra::linalg::SVD::try_new(m.clone(), true, true, f64::EPSILON * 5.0, 0)
        .ok_or_else(|| CaspError::numerical("SVD did not converge"))?;
    let mut u = svd
        .u
        .ok_or_else(|| CaspError::numerical("SVD produced no U factor"))?;
    let mut v_t = svd
        .v_t
        .ok_or_else(|| CaspError::numerical("SVD produced no V^T factor"))?;
    let sv = svd.singular_values;

    let k = sv.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap().then(a.cmp(&b)));

    let mut u_sorted = Mat::zeros(u.nrows(), k);
    let mut vt_sorted = Mat::zeros(k, v_t.ncols());
    let mut sigma = Vec::with_capacity(k);
    for (new_idx, &old_idx) in order.iter().enumerate() {
        u_sorted.set_column(new_idx, &u.column(old_idx));
        vt_sorted.set_row(new_idx, &v_t.row(old_idx));
        sigma.push(sv[old_idx]);
    }
    u = u_sorted;
    v_t = vt_sorted;

    for j in 0..k {
        let flip = u
            .column(j)
            .iter()
            .find(|v| v.abs() > 0.0)
            .map(|v| *v < 0.0)
            .unwrap_or(false);
        if flip {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
            for c in 0..v_t.ncols() {
                v_t[(j, c)] = -v_t[(j, c)];
            }
        }
    }

    Ok(ThinSvd { u, sigma, v_t })
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows(y: &Mat) -> Mat {
    let mut s = y.clone();
    for mut row in s.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    s
}

/// Check that every entry is finite.
pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}
