//! Seeded toy-model generator.
//!
//! Q/K weights are a shared decaying singular spectrum (strongly low-rank,
//! like attention weights in trained transformers) plus a handful of large
//! outlier entries, which stretch direct quantization grids but mostly fall
//! outside the dominant whitened subspace. V/O form an orthogonal pair
//! whose product is the identity, so attention output is a clean copy of
//! the attended context; with the tied output head this gives the untrained
//! model a genuine copy mechanism that is predictive on repetitive data.
//! That skill is what compression can damage, so perplexity responds to it
//! the way it does in trained models. All values are snapped to f32 at
//! creation so save/load round-trips are exact.

use crate::error::Result;
use crate::linalg::Mat;
use crate::model::checkpoint::{
    LayerWeights, ModelCheckpoint, TensorRepr, TransformerConfig, FORMAT_VERSION,
};
use crate::model::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy)]
pub struct ToyModelParams {
    pub config: TransformerConfig,
    /// Geometric decay ratio of the Q/K singular spectrum.
    pub qk_spectrum_decay: f64,
    /// Top singular value of the Q/K spectra; sets the attention logit
    /// spread and with it how concentrated the maps are.
    pub qk_top: f64,
    /// Embedding standard deviation; sets the tied-head logit scale.
    pub embed_std: f64,
    /// Scale of the V-side of the copy path.
    pub copy_strength: f64,
    /// Outlier entries injected into each of W_q and W_k, as a fraction of
    /// the weight count.
    pub qk_outlier_frac: f64,
    /// Outlier magnitude as a multiple of qk_top.
    pub qk_outlier_mag: f64,
    pub seed: u64,
}

impl ToyModelParams {
    pub fn new(config: TransformerConfig, seed: u64) -> Self {
        ToyModelParams {
            config,
            qk_spectrum_decay: 0.75,
            qk_top: 8.0,
            embed_std: 0.1,
            copy_strength: 1.0,
            qk_outlier_frac: 0.02,
            qk_outlier_mag: 1.2,
            seed,
        }
    }
}

fn gaussian(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * std
    })
}

/// Random orthogonal matrix via QR of a Gaussian, with the R diagonal sign
/// fixed so the distribution is Haar and the output deterministic.
fn random_orthogonal(rng: &mut ChaCha12Rng, d: usize) -> Mat {
    let g = gaussian(rng, d, d, 1.0);
    let qr = nalgebra::linalg::QR::new(g.clone());
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// Sprinkle large entries over a copy of the base matrix.
fn add_outliers(rng: &mut ChaCha12Rng, base: &Mat, params: &ToyModelParams) -> Mat {
    let d = base.nrows();
    let mut m = base.clone();
    let count = ((d * d) as f64 * params.qk_outlier_frac).round() as usize;
    for _ in 0..count {
        let i = rng.random_range(0..d);
        let j = rng.random_range(0..d);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        m[(i, j)] += sign * params.qk_outlier_mag * params.qk_top;
    }
    m
}

/// Q/K matrix with singular values `top * decay^i`.
fn spectral_matrix(rng: &mut ChaCha12Rng, d: usize, top: f64, decay: f64) -> Mat {
    let u = random_orthogonal(rng, d);
    let v = random_orthogonal(rng, d);
    let mut sigma = Mat::zeros(d, d);
    let mut s = top;
    for i in 0..d {
        sigma[(i, i)] = s;
        s *= decay;
    }
    u * sigma * v.transpose()
}

fn dense(m: Mat) -> TensorRepr {
    TensorRepr::Dense(Tensor::from_mat(&m))
}

pub fn generate_toy_model(params: &ToyModelParams) -> Result<ModelCheckpoint> {
    let cfg = params.config;
    cfg.validate()?;
    let d = cfg.d;
    let hidden = cfg.mlp_hidden();
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);

    let embedding = Tensor::from_mat(&gaussian(&mut rng, cfg.vocab_size, d, params.embed_std));

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        // Q and K share a decaying-spectrum base, so W_q W_k^T is PSD and
        // tokens attend to other occurrences of themselves. That
        // induction-style pattern is what makes the attention maps carry
        // predictive signal on repetitive data, and it is exactly what
        // rank truncation and quantization can damage.
        let base = spectral_matrix(&mut rng, d, params.qk_top, params.qk_spectrum_decay);
        let w_q = add_outliers(&mut rng, &base, params);
        let w_k = add_outliers(&mut rng, &base, params);
        // V/O form an orthogonal pair whose product is the identity times
        // copy_strength: a clean copy path with no outlier entries, so grid
        // quantization error lands on it in full.
        let q = random_orthogonal(&mut rng, d);
        let w_v = &q * params.copy_strength;
        let w_o = q.transpose();
        let mlp_up = gaussian(&mut rng, d, hidden, 0.7 / (d as f64).sqrt());
        let mlp_down = gaussian(&mut rng, hidden, d, 0.15 / (hidden as f64).sqrt());
        layers.push(LayerWeights {
            w_q: dense(w_q),
            w_k: dense(w_k),
            w_v: dense(w_v),
            w_o: dense(w_o),
            mlp_up: dense(mlp_up),
            mlp_down: dense(mlp_down),
        });
    }

    let model = ModelCheckpoint {
        config: cfg,
        embedding,
        layers,
        format_version: FORMAT_VERSION,
    };
    model.validate()?;
    Ok(model)
}
