//! Toy transformer forward pass and activation collection.
//!
//! Blocks are pre-norm: `x + Attn(rms(x))` then `h + Mlp(rms(h))`, with a
//! parameter-free RMSNorm, causal single- or multi-head attention, a GELU
//! MLP of hidden width 4d, no positional encoding, and a tied output head.
//! Everything is computed in f64 from the f32 stored weights, and sequences
//! fan out as an ordered map, so collected activations are bit-identical
//! across runs and execution modes.

use crate::error::{CaspError, Result};
use crate::linalg::Mat;
use crate::model::calibration::{CalibrationSet, TokenKind};
use crate::model::checkpoint::ModelCheckpoint;
use crate::runtime::{self, ExecMode};

const RMS_EPS: f64 = 1e-6;

/// Input activations for one layer: one row per token.
#[derive(Debug, Clone)]
pub struct ActivationBatch {
    pub x: Mat,
    pub token_kinds: Vec<TokenKind>,
}

/// Pre- and post-block activations of one layer, rows concatenated over all
/// calibration sequences in order.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub x_in: ActivationBatch,
    pub x_out: ActivationBatch,
}

/// Inputs actually seen by each weight matrix, used by data-aware
/// quantization. `attn_in` is the post-norm block input (also the whitening
/// target for Q/K).
#[derive(Debug, Clone)]
pub(crate) struct LayerTaps {
    pub attn_in: Mat,
    pub attn_cat: Mat,
    pub mlp_in: Mat,
    pub mlp_act: Mat,
}

/// Dense f64 weights of one block, materialized once per forward pass.
struct BlockWeights {
    w_q: Mat,
    w_k: Mat,
    w_v: Mat,
    w_o: Mat,
    mlp_up: Mat,
    mlp_down: Mat,
}

pub(crate) fn rms_norm_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Causal scaled-dot-product attention for one head slice.
fn causal_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let n = q.nrows();
    let hd = q.ncols() as f64;
    let scale = 1.0 / hd.sqrt();
    let mut out = Mat::zeros(n, v.ncols());
    for i in 0..n {
        // logits over positions 0..=i with max-subtraction softmax
        let mut logits = Vec::with_capacity(i + 1);
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            let mut dot = 0.0;
            for c in 0..q.ncols() {
                dot += q[(i, c)] * k[(j, c)];
            }
            let l = dot * scale;
            max = max.max(l);
            logits.push(l);
        }
        let mut sum = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for (j, l) in logits.iter().enumerate() {
            let w = l / sum;
            for c in 0..v.ncols() {
                out[(i, c)] += w * v[(j, c)];
            }
        }
    }
    out
}

struct SeqTrace {
    per_layer: Vec<(Mat, Mat, LayerTaps)>, // (x_in, x_out, taps)
    final_hidden: Mat,
}

fn forward_sequence(
    model: &ModelCheckpoint,
    blocks: &[BlockWeights],
    seq: &[u32],
) -> Result<SeqTrace> {
    let d = model.config.d;
    let vocab = model.config.vocab_size;
    let mut x = Mat::zeros(seq.len(), d);
    for (i, &t) in seq.iter().enumerate() {
        if t as usize >= vocab {
            return Err(CaspError::invalid(format!(
                "token {t} out of vocab ({vocab})"
            )));
        }
        for c in 0..d {
            x[(i, c)] = f64::from(model.embedding.get(t as usize, c));
        }
    }

    let heads = model.config.n_heads;
    let hd = d / heads;
    let mut per_layer = Vec::with_capacity(blocks.len());
    for bw in blocks {
        let x_in = x.clone();
        let normed = rms_norm_rows(&x);
        let q = &normed * &bw.w_q;
        let k = &normed * &bw.w_k;
        let v = &normed * &bw.w_v;
        let mut cat = Mat::zeros(seq.len(), d);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let ctx = causal_attention(
                &q.columns(cols.start, hd).into_owned(),
                &k.columns(cols.start, hd).into_owned(),
                &v.columns(cols.start, hd).into_owned(),
            );
            for i in 0..seq.len() {
                for (ci, c) in cols.clone().enumerate() {
                    cat[(i, c)] = ctx[(i, ci)];
                }
            }
        }
        let attn_out = &cat * &bw.w_o;
        let h_mid = &x + attn_out;
        let mlp_in = rms_norm_rows(&h_mid);
        let mut act = &mlp_in * &bw.mlp_up;
        for v in act.iter_mut() {
            *v = gelu(*v);
        }
        let mlp_out = &act * &bw.mlp_down;
        let x_out = &h_mid + mlp_out;
        per_layer.push((
            x_in,
            x_out.clone(),
            LayerTaps {
                attn_in: normed,
                attn_cat: cat,
                mlp_in,
                mlp_act: act,
            },
        ));
        x = x_out;
    }
    Ok(SeqTrace {
        per_layer,
        final_hidden: rms_norm_rows(&x),
    })
}

fn materialize_blocks(model: &ModelCheckpoint) -> Result<Vec<BlockWeights>> {
    model
        .layers
        .iter()
        .map(|l| {
            Ok(BlockWeights {
                w_q: l.w_q.materialize()?,
                w_k: l.w_k.materialize()?,
                w_v: l.w_v.materialize()?,
                w_o: l.w_o.materialize()?,
                mlp_up: l.mlp_up.materialize()?,
                mlp_down: l.mlp_down.materialize()?,
            })
        })
        .collect()
}

fn check_inputs(model: &ModelCheckpoint, calib: &CalibrationSet) -> Result<()> {
    model.validate()?;
    calib.check_vocab(model.config.vocab_size)?;
    if calib.seq_len > model.config.max_seq_len {
        return Err(CaspError::invalid(format!(
            "seq_len {} exceeds model max_seq_len {}",
            calib.seq_len, model.config.max_seq_len
        )));
    }
    Ok(())
}

/// Run the model over the calibration set and collect per-layer pre- and
/// post-block activations (rows concatenated over sequences in order).
pub fn forward_collect(
    model: &ModelCheckpoint,
    calib: &CalibrationSet,
) -> Result<Vec<LayerActivations>> {
    forward_collect_mode(model, calib, ExecMode::default())
}

pub fn forward_collect_mode(
    model: &ModelCheckpoint,
    calib: &CalibrationSet,
    mode: ExecMode,
) -> Result<Vec<LayerActivations>> {
    let (acts, _) = forward_collect_taps(model, calib, mode)?;
    Ok(acts)
}

pub(crate) fn forward_collect_taps(
    model: &ModelCheckpoint,
    calib: &CalibrationSet,
    mode: ExecMode,
) -> Result<(Vec<LayerActivations>, Vec<LayerTaps>)> {
    check_inputs(model, calib)?;
    let blocks = materialize_blocks(model)?;
    let traces: Vec<Result<SeqTrace>> = runtime::map_slice(mode, &calib.sequences, |seq| {
        forward_sequence(model, &blocks, seq)
    });
    let mut ok = Vec::with_capacity(traces.len());
    for t in traces {
        ok.push(t?);
    }

    let n_layers = model.config.n_layers;
    let total_rows: usize = calib.sample_count() * calib.seq_len;
    let d = model.config.d;
    let kinds_per_seq = calib.token_kinds();
    let mut all_kinds = Vec::with_capacity(total_rows);
    for _ in 0..calib.sample_count() {
        all_kinds.extend_from_slice(&kinds_per_seq);
    }

    let stack = |pick: &dyn Fn(&SeqTrace) -> &Mat, cols: usize| -> Mat {
        let mut out = Mat::zeros(total_rows, cols);
        let mut row = 0;
        for t in &ok {
            let m = pick(t);
            for r in 0..m.nrows() {
                for c in 0..cols {
                    out[(row, c)] = m[(r, c)];
                }
                row += 1;
            }
        }
        out
    };

    let mut layer_acts = Vec::with_capacity(n_layers);
    let mut layer_taps = Vec::with_capacity(n_layers);
    for li in 0..n_layers {
        let x_in = stack(&|t: &SeqTrace| &t.per_layer[li].0, d);
        let x_out = stack(&|t: &SeqTrace| &t.per_layer[li].1, d);
        layer_acts.push(LayerActivations {
            x_in: ActivationBatch {
                x: x_in,
                token_kinds: all_kinds.clone(),
            },
            x_out: ActivationBatch {
                x: x_out,
                token_kinds: all_kinds.clone(),
            },
        });
        let hidden = model.config.mlp_hidden();
        layer_taps.push(LayerTaps {
            attn_in: stack(&|t: &SeqTrace| &t.per_layer[li].2.attn_in, d),
            attn_cat: stack(&|t: &SeqTrace| &t.per_layer[li].2.attn_cat, d),
            mlp_in: stack(&|t: &SeqTrace| &t.per_layer[li].2.mlp_in, d),
            mlp_act: stack(&|t: &SeqTrace| &t.per_layer[li].2.mlp_act, hidden),
        });
    }
    Ok((layer_acts, layer_taps))
}

/// Next-token logits for one sequence (tied output head), `seq_len x vocab`.
pub fn sequence_logits(model: &ModelCheckpoint, seq: &[u32]) -> Result<Mat> {
    let blocks = materialize_blocks(model)?;
    let trace = forward_sequence(model, &blocks, seq)?;
    Ok(&trace.final_hidden * model.embedding.to_mat().transpose())
}

/// Perplexity over held-out sequences: exp of the mean negative
/// log-likelihood of each next token under the causal model.
pub fn evaluate_ppl(model: &ModelCheckpoint, heldout: &CalibrationSet) -> Result<f64> {
    evaluate_ppl_mode(model, heldout, ExecMode::default())
}

pub fn evaluate_ppl_mode(
    model: &ModelCheckpoint,
    heldout: &CalibrationSet,
    mode: ExecMode,
) -> Result<f64> {
    check_inputs(model, heldout)?;
    if heldout.seq_len < 2 {
        return Err(CaspError::invalid("perplexity needs sequences of length >= 2"));
    }
    let blocks = materialize_blocks(model)?;
    let emb_t = model.embedding.to_mat().transpose();
    let nlls: Vec<Result<f64>> = runtime::map_slice(mode, &heldout.sequences, |seq| {
        let trace = forward_sequence(model, &blocks, seq)?;
        let logits = &trace.final_hidden * &emb_t;
        let mut nll = 0.0;
        for i in 0..seq.len() - 1 {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[seq[i + 1] as usize];
        }
        Ok(nll)
    });
    let mut total = 0.0;
    for r in nlls {
        total += r?;
    }
    let positions = (heldout.seq_len - 1) * heldout.sample_count();
    Ok((total / positions as f64).exp())
}
