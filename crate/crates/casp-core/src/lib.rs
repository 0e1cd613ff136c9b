//! Attention-sparsity-guided compression for toy transformer checkpoints.
//!
//! The crate implements the full desk-scale recipe: a binary checkpoint
//! format with a toy pre-norm transformer, attention-map sparsity and
//! compression-error analysis with softmax-Jacobian bounds, data-aware
//! whitened low-rank decomposition of the Q/K weights, three interchangeable
//! weight quantizers, closed-form entropic bit allocation with integer
//! rounding, and an orchestration pipeline with structured reports.
//!
//! Data-parallel loops run on rayon when the `parallel` feature (default)
//! is enabled; every loop is map-then-ordered-collect, so outputs are
//! bit-identical across modes and thread counts.

pub mod attention;
pub mod bit_alloc;
pub mod error;
pub mod f16util;
pub mod linalg;
pub mod lowrank;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod runtime;

pub use error::{CaspError, Result};
pub use runtime::ExecMode;
