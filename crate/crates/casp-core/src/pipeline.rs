//! End-to-end compression pipeline and evaluation reports.
//!
//! `compress` runs: forward collection -> whitened low-rank Q/K ->
//! block-influence scoring -> continuous bit allocation -> integer rounding
//! -> per-layer quantization -> evaluation. Every stage failure is tagged
//! with the stage name. The bit budget is measured against the
//! pre-compression parameter total, so parameters removed by the low-rank
//! step fund higher bits for important layers.

use crate::attention::{self, default_eta};
use crate::bit_alloc::{
    allocate_bits, block_influence, round_bits, round_bits_with_order, LayerImportance,
};
use crate::error::{CaspError, Result, StageExt};
use crate::linalg::Mat;
use crate::lowrank::{apply_lowrank_qk_with_inputs, rank_for_keep};
use crate::model::calibration::{CalibGenParams, CalibrationSet};
use crate::model::checkpoint::{FactorStore, ModelCheckpoint, TensorRepr};
use crate::model::format::checkpoint_to_bytes;
use crate::model::forward::{evaluate_ppl_mode, forward_collect_taps, rms_norm_rows};
use crate::model::tensor::Tensor;
use crate::quant::{
    dequantize, effective_bits, quantize_greedy, quantize_rtn, quantize_vq_mode, QuantScheme,
    QuantizedTensor,
};
use crate::runtime::{self, ExecMode};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Full compression recipe. `quant_scheme = None` is the 16-bit passthrough
/// path: low-rank only, no quantization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionRecipe {
    pub rank_keep: f64,
    pub quant_scheme: Option<QuantScheme>,
    pub b_avg: f64,
    /// Entropic regularizer; defaults to `0.1 * stddev(s_l * p_l)`.
    pub mu: Option<f64>,
    pub allowed_bits: Vec<u32>,
    pub group_size: u32,
    pub calib_path: Option<PathBuf>,
    pub seed: u64,
    /// Sparsity threshold; defaults to `0.01 / N`.
    pub eta: Option<f64>,
}

impl CompressionRecipe {
    pub fn new(seed: u64) -> Self {
        CompressionRecipe {
            rank_keep: 0.25,
            quant_scheme: Some(QuantScheme::Rtn),
            b_avg: 2.0,
            mu: None,
            allowed_bits: vec![2, 3],
            group_size: 128,
            calib_path: None,
            seed,
            eta: None,
        }
    }
}

/// Ablation switches for the component study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    /// Closed-form allocation plus greedy rounding.
    Optimal,
    /// Same integer budget, seeded random layer order.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    pub apply_lowrank: bool,
    pub allocation: Allocation,
    pub mode: ExecMode,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            apply_lowrank: true,
            allocation: Allocation::Optimal,
            mode: ExecMode::default(),
        }
    }
}

/// Per-layer row of the evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReportRow {
    pub layer: usize,
    pub n_tokens: usize,
    pub eta: f64,
    pub sparsity: f64,
    pub density: f64,
    pub e: f64,
    pub delta_y_norm: f64,
    pub bound_exact: f64,
    pub bound_paper: f64,
    pub s_l: f64,
    pub p_l: f64,
    pub b_cont: f64,
    pub b_int: u32,
    pub effective_bits: f64,
}

/// Evaluation summary produced by `compress`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl_before: f64,
    pub ppl: f64,
    pub per_layer: Vec<LayerReportRow>,
    pub model_size_bytes: u64,
    pub avg_effective_bits: f64,
    pub b_avg: f64,
    pub mu: f64,
    pub lambda: f64,
    pub seed: u64,
}

/// Sparsity/error analysis of one layer, averaged over calibration
/// sequences (each sequence contributes one N x N attention map).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    pub n_tokens: usize,
    pub eta: f64,
    pub sparsity: f64,
    pub density: f64,
    pub e: f64,
    pub delta_y_norm: f64,
    pub bound_exact: f64,
    pub bound_paper: f64,
}

/// One row of the vision-ratio sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub ratio: f64,
    pub rank_keep: f64,
    pub density_mean: f64,
    pub e_mean: f64,
    pub ppl_original: f64,
    pub ppl_compressed: f64,
    pub relative_ppl_degradation: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SweepConfig {
    pub rank_keep: f64,
    pub sample_count: usize,
    pub seq_len: usize,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

/// Compare attention maps of `orig` against `compressed` layer by layer on
/// the calibration set. Maps are computed per sequence from the post-norm
/// block inputs of the original model; fields are means over sequences.
pub fn analyze_layers(
    orig: &ModelCheckpoint,
    compressed: &ModelCheckpoint,
    calib: &CalibrationSet,
    eta: Option<f64>,
    mode: ExecMode,
) -> Result<Vec<LayerAnalysis>> {
    if orig.config.n_layers != compressed.config.n_layers {
        return Err(CaspError::invalid("models disagree on layer count"));
    }
    let d = orig.config.d;
    let n = calib.seq_len;
    let eta = eta.unwrap_or_else(|| default_eta(n));
    let (acts, _) = forward_collect_taps(orig, calib, mode)?;

    let mut out = Vec::with_capacity(orig.config.n_layers);
    for li in 0..orig.config.n_layers {
        let wq = orig.layers[li].w_q.materialize()?;
        let wk = orig.layers[li].w_k.materialize()?;
        let wq_c = compressed.layers[li].w_q.materialize()?;
        let wk_c = compressed.layers[li].w_k.materialize()?;
        let normed = rms_norm_rows(&acts[li].x_in.x);

        let per_seq: Vec<Result<(f64, f64, f64, f64, f64, f64)>> =
            runtime::map_range(mode, calib.sample_count(), |si| {
                let x = normed.rows(si * n, n).into_owned();
                let rep = attention::compression_error(&x, &wq, &wk, &wq_c, &wk_c, d)?;
                let map = attention::attention_map(&x, &wq, &wk, d)?;
                let stats = attention::sparsity_stats(&map, eta)?;
                Ok((
                    stats.sparsity,
                    stats.density,
                    rep.e,
                    rep.delta_y_norm,
                    rep.bound_exact,
                    rep.bound_paper,
                ))
            });
        let mut acc = [0.0f64; 6];
        let mut count = 0usize;
        for r in per_seq {
            let (s, dn, e, dy, be, bp) = r?;
            for (a, v) in acc.iter_mut().zip([s, dn, e, dy, be, bp]) {
                *a += v;
            }
            count += 1;
        }
        let inv = 1.0 / count as f64;
        out.push(LayerAnalysis {
            layer: li,
            n_tokens: n,
            eta,
            sparsity: acc[0] * inv,
            density: acc[1] * inv,
            e: acc[2] * inv,
            delta_y_norm: acc[3] * inv,
            bound_exact: acc[4] * inv,
            bound_paper: acc[5] * inv,
        })
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Compression
// ---------------------------------------------------------------------------

fn vq_seed(base: u64, layer: usize, slot: usize) -> u64 {
    base ^ ((layer as u64 * 16 + slot as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn quantize_tensor(
    t: &Tensor,
    acts: &Mat,
    scheme: QuantScheme,
    n_bits: u8,
    group: u32,
    seed: u64,
    mode: ExecMode,
) -> Result<QuantizedTensor> {
    match scheme {
        QuantScheme::Rtn => quantize_rtn(t, n_bits, group),
        QuantScheme::Greedy => quantize_greedy(t, acts, n_bits, group),
        QuantScheme::Vq => quantize_vq_mode(t, n_bits, group, seed, mode),
    }
}

fn dense_of(repr: &TensorRepr) -> Result<Tensor> {
    match repr {
        TensorRepr::Dense(t) => Ok(t.clone()),
        TensorRepr::Quantized(q) => dequantize(q),
        TensorRepr::LowRank { .. } => Err(CaspError::invalid(
            "expected a dense slot; low-rank factors are quantized individually",
        )),
    }
}

/// Run the full pipeline. Returns the compressed model and its report.
pub fn compress(
    model: &ModelCheckpoint,
    calib: &CalibrationSet,
    recipe: &CompressionRecipe,
) -> Result<(ModelCheckpoint, EvalReport)> {
    compress_with_options(model, calib, recipe, &PipelineOptions::default())
}

pub fn compress_with_options(
    model: &ModelCheckpoint,
    calib: &CalibrationSet,
    recipe: &CompressionRecipe,
    opts: &PipelineOptions,
) -> Result<(ModelCheckpoint, EvalReport)> {
    let mode = opts.mode;
    model.validate().stage("validate")?;
    if !(recipe.b_avg > 0.0) {
        return Err(CaspError::invalid("b_avg must be positive").in_stage("validate"));
    }

    // Activations of the original model drive whitening.
    let (acts, _) = forward_collect_taps(model, calib, mode).stage("forward_collect")?;

    // Low-rank Q/K in the whitened metric.
    let lowrank_model = if opts.apply_lowrank {
        let attn_inputs: Vec<Mat> = acts.iter().map(|la| rms_norm_rows(&la.x_in.x)).collect();
        apply_lowrank_qk_with_inputs(model, &attn_inputs, recipe.rank_keep, mode)
            .stage("lowrank")?
    } else {
        // Still validates the requested rank so errors surface consistently.
        rank_for_keep(model.config.d, recipe.rank_keep).stage("lowrank")?;
        model.clone()
    };

    // Fresh activations of the compressed-so-far model feed importance
    // scoring and data-aware quantization.
    let (acts2, taps) =
        forward_collect_taps(&lowrank_model, calib, mode).stage("forward_collect")?;

    // Block Influence per layer.
    let mut scores = Vec::with_capacity(model.config.n_layers);
    for la in &acts2 {
        let bi = block_influence(&la.x_in, &la.x_out).stage("block_influence")?;
        scores.push(bi.score);
    }
    let importance = LayerImportance { scores };

    // Budget: p_l after low-rank, P from the original dense counts.
    let params: Vec<f64> = lowrank_model
        .layers
        .iter()
        .map(|l| l.param_count() as f64)
        .collect();
    let total_dense: f64 = model
        .layers
        .iter()
        .map(|l| l.dense_param_count() as f64)
        .sum();
    let mu = recipe.mu.unwrap_or_else(|| {
        let sp: Vec<f64> = importance
            .scores
            .iter()
            .zip(&params)
            .map(|(s, p)| s * p)
            .collect();
        let mean = sp.iter().sum::<f64>() / sp.len() as f64;
        let var = sp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sp.len() as f64;
        let std = var.sqrt();
        if std > 0.0 {
            0.1 * std
        } else {
            1.0
        }
    });
    let plan = allocate_bits(&importance, &params, recipe.b_avg, mu, Some(total_dense))
        .stage("allocate_bits")?;
    let plan = match opts.allocation {
        Allocation::Optimal => round_bits(&plan, &recipe.allowed_bits).stage("round_bits")?,
        Allocation::Random { seed } => {
            let mut order: Vec<usize> = (0..plan.bits_cont.len()).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            round_bits_with_order(&plan, &recipe.allowed_bits, &order).stage("round_bits")?
        }
    };
    let bits_int = plan.bits_int.clone().unwrap();

    // Quantize every block tensor at its layer's integer bits.
    let mut compressed = lowrank_model.clone();
    if let Some(scheme) = recipe.quant_scheme {
        let quantized_layers: Vec<Result<Vec<TensorRepr>>> =
            runtime::map_range(mode, compressed.layers.len(), |li| {
                let layer = &compressed.layers[li];
                let tap = &taps[li];
                let n_bits = bits_int[li] as u8;
                let mut new_slots = Vec::with_capacity(6);
                for (si, (name, repr)) in layer.slots().iter().enumerate() {
                    let acts_for: Mat = match *name {
                        "w_q" | "w_k" | "w_v" => tap.attn_in.clone(),
                        "w_o" => tap.attn_cat.clone(),
                        "mlp_up" => tap.mlp_in.clone(),
                        "mlp_down" => tap.mlp_act.clone(),
                        _ => unreachable!(),
                    };
                    let new_repr = match repr {
                        TensorRepr::LowRank { a, b, rank } => {
                            let a_t = match a {
                                FactorStore::Dense(t) => t.clone(),
                                FactorStore::Quantized(q) => dequantize(q)?,
                            };
                            let b_t = match b {
                                FactorStore::Dense(t) => t.clone(),
                                FactorStore::Quantized(q) => dequantize(q)?,
                            };
                            // Factor b sees the factor-a outputs.
                            let b_acts = &acts_for * a_t.to_mat();
                            let qa = quantize_tensor(
                                &a_t,
                                &acts_for,
                                scheme,
                                n_bits,
                                recipe.group_size,
                                vq_seed(recipe.seed, li, si * 2),
                                ExecMode::Sequential,
                            )?;
                            let qb = quantize_tensor(
                                &b_t,
                                &b_acts,
                                scheme,
                                n_bits,
                                recipe.group_size,
                                vq_seed(recipe.seed, li, si * 2 + 1),
                                ExecMode::Sequential,
                            )?;
                            TensorRepr::LowRank {
                                a: FactorStore::Quantized(qa),
                                b: FactorStore::Quantized(qb),
                                rank: *rank,
                            }
                        }
                        _ => {
                            let t = dense_of(repr)?;
                            TensorRepr::Quantized(quantize_tensor(
                                &t,
                                &acts_for,
                                scheme,
                                n_bits,
                                recipe.group_size,
                                vq_seed(recipe.seed, li, si * 2),
                                ExecMode::Sequential,
                            )?)
                        }
                    };
                    new_slots.push(new_repr);
                }
                Ok(new_slots)
            });
        for (li, slots) in quantized_layers.into_iter().enumerate() {
            let slots = slots.stage("quantize")?;
            let layer = &mut compressed.layers[li];
            for (slot, name) in slots.into_iter().zip(crate::model::checkpoint::SLOT_NAMES) {
                *layer.slot_mut(name).unwrap() = slot;
            }
        }
    }
    compressed.validate().stage("quantize")?;

    // Evaluation: perplexity, per-layer analysis, size accounting.
    let ppl_before = evaluate_ppl_mode(model, calib, mode).stage("evaluate")?;
    let ppl = evaluate_ppl_mode(&compressed, calib, mode).stage("evaluate")?;
    let analyses =
        analyze_layers(model, &compressed, calib, recipe.eta, mode).stage("evaluate")?;
    let bytes = checkpoint_to_bytes(&compressed).stage("evaluate")?;

    let avg_eff = avg_effective_bits(&compressed);
    let per_layer = analyses
        .into_iter()
        .enumerate()
        .map(|(li, a)| LayerReportRow {
            layer: a.layer,
            n_tokens: a.n_tokens,
            eta: a.eta,
            sparsity: a.sparsity,
            density: a.density,
            e: a.e,
            delta_y_norm: a.delta_y_norm,
            bound_exact: a.bound_exact,
            bound_paper: a.bound_paper,
            s_l: importance.scores[li],
            p_l: params[li],
            b_cont: plan.bits_cont[li],
            b_int: bits_int[li],
            effective_bits: layer_effective_bits(&compressed.layers[li]),
        })
        .collect();

    let report = EvalReport {
        ppl_before,
        ppl,
        per_layer,
        model_size_bytes: bytes.len() as u64,
        avg_effective_bits: avg_eff,
        b_avg: recipe.b_avg,
        mu,
        lambda: plan.lambda,
        seed: recipe.seed,
    };
    Ok((compressed, report))
}

/// Stored bits of one representation: quantized slots count index plus
/// parameter overhead; dense storage counts 32 bits per stored value.
fn repr_stored_bits(repr: &TensorRepr) -> f64 {
    let quant_bits = |q: &QuantizedTensor| {
        let eb = effective_bits(q);
        eb.bits_per_weight * q.weight_count() as f64
    };
    match repr {
        TensorRepr::Dense(t) => 32.0 * t.len() as f64,
        TensorRepr::Quantized(q) => quant_bits(q),
        TensorRepr::LowRank { a, b, .. } => {
            let f = |s: &FactorStore| match s {
                FactorStore::Dense(t) => 32.0 * t.len() as f64,
                FactorStore::Quantized(q) => quant_bits(q),
            };
            f(a) + f(b)
        }
    }
}

fn layer_effective_bits(layer: &crate::model::checkpoint::LayerWeights) -> f64 {
    let bits: f64 = layer.slots().iter().map(|(_, r)| repr_stored_bits(r)).sum();
    bits / layer.dense_param_count() as f64
}

/// Average stored bits per original dense weight across all block tensors
/// (embedding and head excluded; they are never quantized).
pub fn avg_effective_bits(model: &ModelCheckpoint) -> f64 {
    let mut bits = 0.0;
    let mut dense = 0.0;
    for layer in &model.layers {
        for (_, repr) in layer.slots() {
            bits += repr_stored_bits(repr);
            let (r, c) = repr.dims();
            dense += (r * c) as f64;
        }
    }
    bits / dense
}

// ---------------------------------------------------------------------------
// Vision-ratio sweep
// ---------------------------------------------------------------------------

pub fn sweep_vision_ratio(
    model: &ModelCheckpoint,
    ratios: &[f64],
    cfg: &SweepConfig,
) -> Result<Vec<SweepRecord>> {
    let mode = ExecMode::default();
    if ratios.is_empty() {
        return Err(CaspError::invalid("no ratios given"));
    }
    for &r in ratios {
        if !(0.0..1.0).contains(&r) {
            return Err(CaspError::invalid(format!("ratio {r} outside [0, 1)")));
        }
    }
    let vocab = model.config.vocab_size;
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let calib = crate::model::calibration::generate_calibration(
            &CalibGenParams::new(vocab, cfg.sample_count, cfg.seq_len, cfg.seed)
                .with_vision_ratio(ratio),
        )
        .stage("sweep")?;
        let heldout = crate::model::calibration::generate_calibration(
            &CalibGenParams::new(vocab, cfg.sample_count, cfg.seq_len, cfg.seed ^ 0x5EED)
                .with_vision_ratio(ratio),
        )
        .stage("sweep")?;

        let (acts, _) = forward_collect_taps(model, &calib, mode).stage("forward_collect")?;
        let attn_inputs: Vec<Mat> = acts.iter().map(|la| rms_norm_rows(&la.x_in.x)).collect();
        let lowrank =
            apply_lowrank_qk_with_inputs(model, &attn_inputs, cfg.rank_keep, mode)
                .stage("lowrank")?;

        let analyses = analyze_layers(model, &lowrank, &calib, None, mode).stage("sweep")?;
        let e_mean = analyses.iter().map(|a| a.e).sum::<f64>() / analyses.len() as f64;
        let density_mean =
            analyses.iter().map(|a| a.density).sum::<f64>() / analyses.len() as f64;
        let ppl_original = evaluate_ppl_mode(model, &heldout, mode).stage("evaluate")?;
        let ppl_compressed = evaluate_ppl_mode(&lowrank, &heldout, mode).stage("evaluate")?;
        out.push(SweepRecord {
            ratio,
            rank_keep: cfg.rank_keep,
            density_mean,
            e_mean,
            ppl_original,
            ppl_compressed,
            relative_ppl_degradation: ppl_compressed / ppl_original - 1.0,
        });
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spearman_monotone_sequences() {
        assert_relative_eq!(
            spearman_rho(&[0.0, 0.25, 0.5, 0.75], &[9.0, 7.0, 5.0, 1.0]),
            -1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn spearman_handles_ties() {
        let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0], &[5.0, 5.0, 2.0, 1.0]);
        assert!(rho < -0.9);
    }
}
