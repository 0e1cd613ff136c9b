//! Weight quantizers: round-to-nearest grids, data-aware greedy (error
//! compensation through the calibration Gram matrix), and codebook vector
//! quantization, plus effective-bit accounting.
//!
//! All grid parameters (scales, zero points) and codebook entries are stored
//! at 16-bit precision and snapped at creation time, so the serialized and
//! in-memory values are identical bits.

mod greedy;
mod rtn;
mod vq;

pub use greedy::{quantize_greedy, reconstruction_error};
pub use rtn::quantize_rtn;
pub use vq::{quantize_vq, quantize_vq_mode};

pub(crate) use rtn::{grid_for_group, GridParams};

use crate::error::{CaspError, Result};
use crate::f16util;
use crate::model::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Quantization scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    Rtn,
    Greedy,
    Vq,
}

impl QuantScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuantScheme::Rtn => "rtn",
            QuantScheme::Greedy => "greedy",
            QuantScheme::Vq => "vq",
        }
    }
}

impl std::str::FromStr for QuantScheme {
    type Err = CaspError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtn" => Ok(QuantScheme::Rtn),
            "greedy" => Ok(QuantScheme::Greedy),
            "vq" => Ok(QuantScheme::Vq),
            other => Err(CaspError::invalid(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Lookup table of `2^(n*g)` g-dimensional vectors. Entries are f16 bits.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub n_bits: u8,
    pub vec_dim: u32,
    /// Row-major entries, `entry_count() * vec_dim` f16 bit patterns.
    pub entries: Vec<u16>,
}

impl Codebook {
    pub fn entry_count(&self) -> usize {
        1usize << (self.n_bits as u32 * self.vec_dim)
    }

    pub fn entry(&self, idx: usize) -> &[u16] {
        let g = self.vec_dim as usize;
        &self.entries[idx * g..(idx + 1) * g]
    }

    pub fn entry_f64(&self, idx: usize, out: &mut [f64]) {
        for (o, &b) in out.iter_mut().zip(self.entry(idx)) {
            *o = f64::from(f16util::from_bits(b));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = self.entry_count() * self.vec_dim as usize;
        if self.entries.len() != want {
            return Err(CaspError::invalid(format!(
                "codebook has {} values, expected {want}",
                self.entries.len()
            )));
        }
        if self.entries.iter().any(|&b| {
            let v = f16util::from_bits(b);
            !v.is_finite()
        }) {
            return Err(CaspError::invalid("codebook contains non-finite entries"));
        }
        Ok(())
    }
}

/// A quantized weight tensor.
///
/// For `rtn`/`greedy`, grid groups run over the row-major flattened weight
/// stream (`group_size` consecutive weights, last group may be short); each
/// group stores an f16 scale and zero point and each weight stores an n-bit
/// level index. For `vq`, each row is zero-padded to a multiple of the
/// vector dim `g` and split into g-vectors, each storing one codebook index.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub scheme: QuantScheme,
    pub n_bits: u8,
    /// Grid group length (rtn/greedy) or vector dimensionality g (vq).
    pub group_size: u32,
    pub rows: u32,
    pub cols: u32,
    /// One entry per weight (rtn/greedy) or per g-vector (vq).
    pub indices: Vec<u32>,
    /// Per-group scale, f16 bits (empty for vq).
    pub scales: Vec<u16>,
    /// Per-group zero point (group minimum), f16 bits (empty for vq).
    pub zeros: Vec<u16>,
    pub codebook: Option<Codebook>,
}

impl QuantizedTensor {
    pub fn weight_count(&self) -> usize {
        self.rows as usize * self.cols as usize
    }

    pub fn group_count(&self) -> usize {
        self.weight_count().div_ceil(self.group_size as usize)
    }

    /// Padded columns for the vq layout.
    pub fn padded_cols(&self) -> usize {
        let g = self.group_size as usize;
        (self.cols as usize).div_ceil(g) * g
    }

    pub fn vector_count(&self) -> usize {
        self.rows as usize * self.padded_cols() / self.group_size as usize
    }

    pub fn params_finite(&self) -> bool {
        let ok_params = self
            .scales
            .iter()
            .chain(self.zeros.iter())
            .all(|&b| f16util::from_bits(b).is_finite());
        let ok_cb = self
            .codebook
            .as_ref()
            .map(|cb| cb.validate().is_ok())
            .unwrap_or(true);
        ok_params && ok_cb
    }

    /// Structural validation; catches corrupt index streams.
    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            QuantScheme::Rtn | QuantScheme::Greedy => {
                if self.n_bits == 0 || self.n_bits > 16 {
                    return Err(CaspError::invalid("n_bits out of range"));
                }
                if self.indices.len() != self.weight_count() {
                    return Err(CaspError::invalid("index stream length mismatch"));
                }
                let groups = self.group_count();
                if self.scales.len() != groups || self.zeros.len() != groups {
                    return Err(CaspError::invalid("group parameter count mismatch"));
                }
                let max = 1u32 << self.n_bits;
                if self.indices.iter().any(|&i| i >= max) {
                    return Err(CaspError::invalid("corrupt index stream: level out of range"));
                }
            }
            QuantScheme::Vq => {
                let cb = self
                    .codebook
                    .as_ref()
                    .ok_or_else(|| CaspError::invalid("vq tensor missing codebook"))?;
                cb.validate()?;
                if cb.vec_dim != self.group_size || cb.n_bits != self.n_bits {
                    return Err(CaspError::invalid("codebook does not match tensor"));
                }
                if self.indices.len() != self.vector_count() {
                    return Err(CaspError::invalid("index stream length mismatch"));
                }
                let max = cb.entry_count() as u32;
                if self.indices.iter().any(|&i| i >= max) {
                    return Err(CaspError::invalid(
                        "corrupt index stream: codebook index out of range",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Deterministic reconstruction of the dense weight tensor.
pub fn dequantize(qt: &QuantizedTensor) -> Result<Tensor> {
    qt.validate()?;
    let (rows, cols) = (qt.rows as usize, qt.cols as usize);
    let mut out = vec![0.0f32; rows * cols];
    match qt.scheme {
        QuantScheme::Rtn | QuantScheme::Greedy => {
            let g = qt.group_size as usize;
            for (flat, v) in out.iter_mut().enumerate() {
                let grp = flat / g;
                let scale = f64::from(f16util::from_bits(qt.scales[grp]));
                let zero = f64::from(f16util::from_bits(qt.zeros[grp]));
                *v = (zero + scale * f64::from(qt.indices[flat])) as f32;
            }
        }
        QuantScheme::Vq => {
            let g = qt.group_size as usize;
            let cb = qt.codebook.as_ref().unwrap();
            let padded = qt.padded_cols();
            let per_row = padded / g;
            let mut entry = vec![0.0f64; g];
            for r in 0..rows {
                for v in 0..per_row {
                    cb.entry_f64(qt.indices[r * per_row + v] as usize, &mut entry);
                    for (j, &e) in entry.iter().enumerate() {
                        let c = v * g + j;
                        if c < cols {
                            out[r * cols + c] = e as f32;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(rows, cols, out)
}

/// Effective storage cost of a quantized tensor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EffectiveBits {
    /// Total bits (indices + parameter overhead) per logical weight.
    pub bits_per_weight: f64,
    pub index_bits_per_weight: f64,
    pub overhead_bits_per_weight: f64,
    /// Set when the codebook alone outweighs the f32 tensor it encodes.
    pub codebook_dominates: bool,
}

/// Bits-per-weight accounting: n-bit indices plus 16-bit scale and 16-bit
/// zero per group (rtn/greedy), or amortized f16 codebook storage (vq).
/// Totals are exact integers; the single division to bits-per-weight is the
/// only rounding step.
pub fn effective_bits(qt: &QuantizedTensor) -> EffectiveBits {
    let count = qt.weight_count() as u128;
    let (index_bits, overhead_bits): (u128, u128) = match qt.scheme {
        QuantScheme::Rtn | QuantScheme::Greedy => (
            count * qt.n_bits as u128,
            qt.group_count() as u128 * 32,
        ),
        QuantScheme::Vq => {
            let per_vec = qt.n_bits as u128 * qt.group_size as u128;
            let cb_bits = qt
                .codebook
                .as_ref()
                .map(|cb| cb.entries.len() as u128 * 16)
                .unwrap_or(0);
            (qt.vector_count() as u128 * per_vec, cb_bits)
        }
    };
    let codebook_dominates = matches!(qt.scheme, QuantScheme::Vq) && overhead_bits > count * 32;
    EffectiveBits {
        bits_per_weight: (index_bits + overhead_bits) as f64 / count as f64,
        index_bits_per_weight: index_bits as f64 / count as f64,
        overhead_bits_per_weight: overhead_bits as f64 / count as f64,
        codebook_dominates,
    }
}
