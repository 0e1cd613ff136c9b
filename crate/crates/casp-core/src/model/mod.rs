//! Checkpoint model, binary formats, calibration corpora, and the toy
//! transformer forward pass.

pub mod calibration;
pub mod checkpoint;
pub mod format;
pub mod forward;
pub mod generate;
pub mod tensor;

pub use calibration::{
    generate_calibration, CalibGenParams, CalibrationSet, TokenKind, VISION_SYMBOLS,
};
pub use checkpoint::{
    FactorStore, LayerWeights, ModelCheckpoint, TensorRepr, TransformerConfig, FORMAT_VERSION,
    SLOT_NAMES,
};
pub use format::{
    calibration_to_bytes, checkpoint_from_bytes, checkpoint_to_bytes, load_calibration,
    load_checkpoint, save_calibration, save_checkpoint,
};
pub use forward::{
    evaluate_ppl, evaluate_ppl_mode, forward_collect, forward_collect_mode, sequence_logits,
    ActivationBatch, LayerActivations,
};
pub use generate::{generate_toy_model, ToyModelParams};
pub use tensor::Tensor;
