//! Data-aware low-rank decomposition of the Q/K weights.
//!
//! The calibration covariance `C = (1/M) sum x x^T` is Cholesky-factored as
//! `L L^T`; the whitening matrix is `L^{-1}`. A weight `w` is truncated in
//! the whitened metric by the SVD of `L^T w`, which makes the de-whitened
//! rank-r product `a * b` the minimizer of the activation-space error
//! `||X w - X (a b)||_F` under the fitted covariance.

use crate::error::{CaspError, Result};
use crate::linalg::{all_finite, thin_svd, Mat};
use crate::model::calibration::CalibrationSet;
use crate::model::checkpoint::{FactorStore, ModelCheckpoint, TensorRepr};
use crate::model::forward::{forward_collect_mode, rms_norm_rows, ActivationBatch};
use crate::model::tensor::Tensor;
use crate::runtime::{self, ExecMode};
use nalgebra::linalg::Cholesky;

/// Damping ladder applied when the caller passes zero damping, as multiples
/// of `trace(C)/d`.
pub const DAMPING_LADDER: [f64; 3] = [0.0, 1e-6, 1e-4];

/// Whitening transform fitted to calibration activations.
#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    /// Covariance of the calibration rows.
    pub cov: Mat,
    /// Lower-triangular L with `L L^T = cov + damping * I`.
    pub chol: Mat,
    /// `L^{-1}`, computed by triangular solve.
    pub white: Mat,
    /// Diagonal damping actually applied.
    pub damping: f64,
}

impl WhiteningTransform {
    /// Identity transform of dimension `d` (plain SVD truncation).
    pub fn identity(d: usize) -> Self {
        WhiteningTransform {
            cov: Mat::identity(d, d),
            chol: Mat::identity(d, d),
            white: Mat::identity(d, d),
            damping: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// `||A C A^T - I||_F`, the whitening quality on the undamped covariance.
    pub fn whitening_deviation(&self) -> f64 {
        let d = self.dim();
        (&self.white * &self.cov * self.white.transpose() - Mat::identity(d, d)).norm()
    }
}

/// Rank-r factors of a weight matrix.
#[derive(Debug, Clone)]
pub struct LowRankFactors {
    pub a: Mat,
    pub b: Mat,
    pub rank: usize,
    pub original_dims: (usize, usize),
    /// Fraction of squared singular values of the whitened weight retained.
    pub kept_energy: f64,
}

impl LowRankFactors {
    pub fn reconstruct(&self) -> Mat {
        &self.a * &self.b
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.original_dims.0 + self.original_dims.1)
    }
}

/// Fit the covariance and its Cholesky whitening over activation batches.
///
/// With `damping > 0` a single attempt is made at that diagonal load. With
/// `damping == 0` the row count must be at least the dimension, and the
/// ladder `{0, 1e-6, 1e-4} * trace(C)/d` is climbed until the Cholesky
/// succeeds.
pub fn fit_whitening(acts: &[ActivationBatch], damping: f64) -> Result<WhiteningTransform> {
    fit_whitening_mode(acts, damping, ExecMode::default())
}

pub fn fit_whitening_mode(
    acts: &[ActivationBatch],
    damping: f64,
    mode: ExecMode,
) -> Result<WhiteningTransform> {
    if acts.is_empty() || acts.iter().all(|b| b.x.nrows() == 0) {
        return Err(CaspError::invalid("no activation rows"));
    }
    let d = acts[0].x.ncols();
    if acts.iter().any(|b| b.x.ncols() != d) {
        return Err(CaspError::invalid("activation batches disagree on dimension"));
    }
    if acts.iter().any(|b| !all_finite(&b.x)) {
        return Err(CaspError::invalid("non-finite activations"));
    }
    if damping < 0.0 {
        return Err(CaspError::invalid("damping must be non-negative"));
    }
    let total_rows: usize = acts.iter().map(|b| b.x.nrows()).sum();
    if damping == 0.0 && total_rows < d {
        return Err(CaspError::invalid(format!(
            "{total_rows} rows < dimension {d}: rank-deficient covariance needs damping > 0"
        )));
    }

    // Associative per-batch partial sums, reduced in fixed order.
    let partials = runtime::map_slice(mode, acts, |b| b.x.transpose() * &b.x);
    let mut cov = Mat::zeros(d, d);
    for p in partials {
        cov += p;
    }
    cov /= total_rows as f64;

    let trace: f64 = cov.diagonal().iter().sum();
    let ladder: Vec<f64> = if damping > 0.0 {
        vec![damping]
    } else {
        DAMPING_LADDER.iter().map(|m| m * trace / d as f64).collect()
    };

    for &eps in &ladder {
        let damped = &cov + Mat::identity(d, d) * eps;
        if let Some(chol) = Cholesky::new(damped) {
            let l = chol.l();
            let white = l
                .solve_lower_triangular(&Mat::identity(d, d))
                .ok_or_else(|| CaspError::numerical("triangular solve failed"))?;
            return Ok(WhiteningTransform {
                cov,
                chol: l,
                white,
                damping: eps,
            });
        }
    }
    Err(CaspError::numerical(format!(
        "Cholesky failed after damping ladder {ladder:?}"
    )))
}

/// Truncated SVD of the whitened weight `L^T w`, de-whitened so `a * b`
/// minimizes `||X w - X (a b)||_F` among rank-r maps under the fitted
/// covariance. `kept_energy` comes from the whitened spectrum.
pub fn decompose_whitened(
    w: &Mat,
    wt: &WhiteningTransform,
    rank: usize,
) -> Result<LowRankFactors> {
    let (rows, cols) = w.shape();
    if rows != wt.dim() {
        return Err(CaspError::invalid(format!(
            "weight rows {rows} do not match whitening dim {}",
            wt.dim()
        )));
    }
    if rank == 0 || rank >= rows.min(cols) {
        return Err(CaspError::invalid(format!(
            "rank {rank} out of range (0, {})",
            rows.min(cols)
        )));
    }
    let whitened = wt.chol.transpose() * w;
    let svd = thin_svd(&whitened)?;

    let total_energy: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let kept: f64 = svd.sigma[..rank].iter().map(|s| s * s).sum();
    let kept_energy = if total_energy > 0.0 {
        kept / total_energy
    } else {
        1.0
    };

    // Singular values split as sqrt(S) onto both factors to balance their
    // dynamic ranges: a = L^{-T} U_r sqrt(S_r), b = sqrt(S_r) V_r^T.
    let mut us = Mat::zeros(rows, rank);
    let mut b = Mat::zeros(rank, cols);
    for j in 0..rank {
        let root = svd.sigma[j].sqrt();
        for i in 0..rows {
            us[(i, j)] = svd.u[(i, j)] * root;
        }
        for c in 0..cols {
            b[(j, c)] = root * svd.v_t[(j, c)];
        }
    }
    let a = wt
        .chol
        .transpose()
        .solve_upper_triangular(&us)
        .ok_or_else(|| CaspError::numerical("de-whitening solve failed"))?;

    Ok(LowRankFactors {
        a,
        b,
        rank,
        original_dims: (rows, cols),
        kept_energy,
    })
}

/// Rank for a parameter-fraction target: factors store `r * 2d` params per
/// d x d matrix, so `r = floor(keep * d / 2)`.
pub fn rank_for_keep(d: usize, rank_keep: f64) -> Result<usize> {
    if !(rank_keep > 0.0 && rank_keep <= 1.0) {
        return Err(CaspError::invalid("rank_keep must lie in (0, 1]"));
    }
    let r = (rank_keep * d as f64 / 2.0).floor() as usize;
    if r < 1 {
        return Err(CaspError::invalid(format!(
            "rank_keep {rank_keep} too small for d = {d} (rank would be 0)"
        )));
    }
    Ok(r)
}

/// Replace every layer's dense Q/K weights with whitened rank-r factor
/// pairs fitted to that layer's post-norm input activations.
pub fn apply_lowrank_qk(
    model: &ModelCheckpoint,
    calib: &CalibrationSet,
    rank_keep: f64,
) -> Result<ModelCheckpoint> {
    let mode = ExecMode::default();
    let acts = forward_collect_mode(model, calib, mode)?;
    let attn_inputs: Vec<Mat> = acts.iter().map(|la| rms_norm_rows(&la.x_in.x)).collect();
    apply_lowrank_qk_with_inputs(model, &attn_inputs, rank_keep, mode)
}

/// Core of [`apply_lowrank_qk`] reusing already-collected post-norm inputs.
pub(crate) fn apply_lowrank_qk_with_inputs(
    model: &ModelCheckpoint,
    attn_inputs: &[Mat],
    rank_keep: f64,
    mode: ExecMode,
) -> Result<ModelCheckpoint> {
    let d = model.config.d;
    let rank = rank_for_keep(d, rank_keep)?;
    if attn_inputs.len() != model.layers.len() {
        return Err(CaspError::invalid("one input batch per layer required"));
    }

    let factored: Vec<Result<(TensorRepr, TensorRepr)>> =
        runtime::map_range(mode, model.layers.len(), |li| {
            let batch = ActivationBatch {
                x: attn_inputs[li].clone(),
                token_kinds: Vec::new(),
            };
            let wt = fit_whitening_mode(std::slice::from_ref(&batch), 0.0, ExecMode::Sequential)?;
            let layer = &model.layers[li];
            let mut out = Vec::with_capacity(2);
            for repr in [&layer.w_q, &layer.w_k] {
                let dense = repr.materialize()?;
                let f = decompose_whitened(&dense, &wt, rank)?;
                out.push(TensorRepr::LowRank {
                    a: FactorStore::Dense(Tensor::from_mat(&f.a)),
                    b: FactorStore::Dense(Tensor::from_mat(&f.b)),
                    rank,
                });
            }
            let b = out.pop().unwrap();
            let a = out.pop().unwrap();
            Ok((a, b))
        });

    let mut new_model = model.clone();
    for (li, pair) in factored.into_iter().enumerate() {
        let (wq, wk) = pair.map_err(|e| {
            CaspError::invalid(format!("layer {li}: {e}"))
        })?;
        new_model.layers[li].w_q = wq;
        new_model.layers[li].w_k = wk;
    }
    new_model.validate()?;
    Ok(new_model)
}
