//! Checkpoint model: transformer topology plus per-layer weight slots, each
//! in exactly one representation (dense, low-rank factors, or quantized).

use crate::error::{CaspError, Result};
use crate::linalg::Mat;
use crate::model::tensor::Tensor;
use crate::quant::QuantizedTensor;

/// Toy transformer topology. Blocks are pre-norm attention + MLP with a
/// parameter-free RMSNorm, learned embeddings, and a tied output head. The
/// MLP hidden width is fixed at `4 * d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl TransformerConfig {
    pub fn mlp_hidden(&self) -> usize {
        4 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(CaspError::invalid("config dimensions must be positive"));
        }
        if self.d % self.n_heads != 0 {
            return Err(CaspError::invalid(format!(
                "hidden dim {} not divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Storage for one factor of a low-rank pair: dense or quantized.
#[derive(Debug, Clone)]
pub enum FactorStore {
    Dense(Tensor),
    Quantized(QuantizedTensor),
}

impl FactorStore {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            FactorStore::Dense(t) => (t.rows(), t.cols()),
            FactorStore::Quantized(q) => (q.rows as usize, q.cols as usize),
        }
    }

    pub fn materialize(&self) -> Result<Mat> {
        match self {
            FactorStore::Dense(t) => Ok(t.to_mat()),
            FactorStore::Quantized(q) => Ok(crate::quant::dequantize(q)?.to_mat()),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            FactorStore::Dense(t) => t.is_finite(),
            FactorStore::Quantized(q) => q.params_finite(),
        }
    }
}

/// One weight slot. Exactly one representation is active at a time;
/// `param_count` always reflects the active representation.
#[derive(Debug, Clone)]
pub enum TensorRepr {
    Dense(Tensor),
    LowRank {
        a: FactorStore,
        b: FactorStore,
        rank: usize,
    },
    Quantized(QuantizedTensor),
}

impl TensorRepr {
    /// Logical dims of the tensor this slot represents.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            TensorRepr::Dense(t) => (t.rows(), t.cols()),
            TensorRepr::LowRank { a, b, .. } => (a.dims().0, b.dims().1),
            TensorRepr::Quantized(q) => (q.rows as usize, q.cols as usize),
        }
    }

    /// Stored parameter count of the active representation:
    /// dense `rows*cols`, low-rank `r*(rows+cols)`, quantized `rows*cols`
    /// logical weights.
    pub fn param_count(&self) -> usize {
        match self {
            TensorRepr::Dense(t) => t.rows() * t.cols(),
            TensorRepr::LowRank { a, b, rank } => rank * (a.dims().0 + b.dims().1),
            TensorRepr::Quantized(q) => (q.rows as usize) * (q.cols as usize),
        }
    }

    /// Dense f64 view of the represented weight (factor products included).
    pub fn materialize(&self) -> Result<Mat> {
        match self {
            TensorRepr::Dense(t) => Ok(t.to_mat()),
            TensorRepr::LowRank { a, b, .. } => Ok(a.materialize()? * b.materialize()?),
            TensorRepr::Quantized(q) => Ok(crate::quant::dequantize(q)?.to_mat()),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            TensorRepr::Dense(t) => t.is_finite(),
            TensorRepr::LowRank { a, b, .. } => a.is_finite() && b.is_finite(),
            TensorRepr::Quantized(q) => q.params_finite(),
        }
    }
}

/// Slot names in serialization order.
pub const SLOT_NAMES: [&str; 6] = ["w_q", "w_k", "w_v", "w_o", "mlp_up", "mlp_down"];

/// Weights of one transformer block.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: TensorRepr,
    pub w_k: TensorRepr,
    pub w_v: TensorRepr,
    pub w_o: TensorRepr,
    pub mlp_up: TensorRepr,
    pub mlp_down: TensorRepr,
}

impl LayerWeights {
    pub fn slots(&self) -> [(&'static str, &TensorRepr); 6] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("mlp_up", &self.mlp_up),
            ("mlp_down", &self.mlp_down),
        ]
    }

    pub fn slot(&self, name: &str) -> Option<&TensorRepr> {
        match name {
            "w_q" => Some(&self.w_q),
            "w_k" => Some(&self.w_k),
            "w_v" => Some(&self.w_v),
            "w_o" => Some(&self.w_o),
            "mlp_up" => Some(&self.mlp_up),
            "mlp_down" => Some(&self.mlp_down),
            _ => None,
        }
    }

    pub fn slot_mut(&mut self, name: &str) -> Option<&mut TensorRepr> {
        match name {
            "w_q" => Some(&mut self.w_q),
            "w_k" => Some(&mut self.w_k),
            "w_v" => Some(&mut self.w_v),
            "w_o" => Some(&mut self.w_o),
            "mlp_up" => Some(&mut self.mlp_up),
            "mlp_down" => Some(&mut self.mlp_down),
            _ => None,
        }
    }

    /// Total stored params across all six slots (active representations).
    pub fn param_count(&self) -> usize {
        self.slots().iter().map(|(_, r)| r.param_count()).sum()
    }

    /// Logical weight count if every slot were dense.
    pub fn dense_param_count(&self) -> usize {
        self.slots()
            .iter()
            .map(|(_, r)| {
                let (rows, cols) = r.dims();
                rows * cols
            })
            .sum()
    }
}

pub const FORMAT_VERSION: u32 = 1;

/// A complete model: config, embedding table (always dense, tied output
/// head), and per-block weights.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: TransformerConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub format_version: u32,
}

impl ModelCheckpoint {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.is_empty() {
            return Err(CaspError::invalid("empty model"));
        }
        if self.layers.len() != self.config.n_layers {
            return Err(CaspError::invalid(format!(
                "layer count {} does not match config n_layers {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        let d = self.config.d;
        let hidden = self.config.mlp_hidden();
        if self.embedding.rows() != self.config.vocab_size || self.embedding.cols() != d {
            return Err(CaspError::invalid("embedding dims do not match config"));
        }
        if !self.embedding.is_finite() {
            return Err(CaspError::invalid("embedding contains non-finite values"));
        }
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, repr) in layer.slots() {
                let want = match name {
                    "mlp_up" => (d, hidden),
                    "mlp_down" => (hidden, d),
                    _ => (d, d),
                };
                if repr.dims() != want {
                    return Err(CaspError::invalid(format!(
                        "layer {li} slot {name}: dims {:?} != expected {:?}",
                        repr.dims(),
                        want
                    )));
                }
                if !repr.is_finite() {
                    return Err(CaspError::invalid(format!(
                        "layer {li} slot {name}: non-finite values"
                    )));
                }
            }
        }
        Ok(())
    }
}
