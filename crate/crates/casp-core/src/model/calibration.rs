//! Calibration corpora: token-id sequences plus the synthetic generator
//! that substitutes for a real text corpus at this scale.

use crate::error::{CaspError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Zipf};

/// Per-token tag used by the synthetic sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Vision,
}

/// Fixed-length token-id sequences.
///
/// `vision_prefix` is in-memory generator metadata (the first so many tokens
/// of every sequence are the low-entropy "vision block"); it is not part of
/// the on-disk format, so sets loaded from a file carry 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub vision_prefix: usize,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>, seq_len: usize, vision_prefix: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(CaspError::invalid("calibration set has no sequences"));
        }
        if seq_len == 0 {
            return Err(CaspError::invalid("seq_len must be positive"));
        }
        if vision_prefix > seq_len {
            return Err(CaspError::invalid("vision prefix exceeds seq_len"));
        }
        for (i, s) in sequences.iter().enumerate() {
            if s.len() != seq_len {
                return Err(CaspError::invalid(format!(
                    "sequence {i} has length {}, expected {seq_len}",
                    s.len()
                )));
            }
        }
        Ok(CalibrationSet {
            sequences,
            seq_len,
            vision_prefix,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.sequences.len()
    }

    /// Check every token id against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(CaspError::invalid(format!(
                    "sequence {i} contains token {t} >= vocab size {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn token_kinds(&self) -> Vec<TokenKind> {
        let mut kinds = Vec::with_capacity(self.seq_len);
        for pos in 0..self.seq_len {
            kinds.push(if pos < self.vision_prefix {
                TokenKind::Vision
            } else {
                TokenKind::Text
            });
        }
        kinds
    }
}

/// Parameters for the synthetic corpus generator.
#[derive(Debug, Clone, Copy)]
pub struct CalibGenParams {
    pub vocab_size: usize,
    pub sample_count: usize,
    pub seq_len: usize,
    /// Fraction of every sequence occupied by the leading vision block.
    pub vision_ratio: f64,
    /// Zipf exponent for the text tokens.
    pub zipf_s: f64,
    /// Probability that a text token repeats its predecessor (run
    /// structure; what makes copy-style attention predictive).
    pub repeat_p: f64,
    pub seed: u64,
}

impl CalibGenParams {
    pub fn new(vocab_size: usize, sample_count: usize, seq_len: usize, seed: u64) -> Self {
        CalibGenParams {
            vocab_size,
            sample_count,
            seq_len,
            vision_ratio: 0.0,
            zipf_s: 1.05,
            repeat_p: 0.5,
            seed,
        }
    }

    pub fn with_vision_ratio(mut self, ratio: f64) -> Self {
        self.vision_ratio = ratio;
        self
    }
}

/// Number of reserved ids at the top of the vocabulary used by the
/// low-entropy vision block.
pub const VISION_SYMBOLS: usize = 2;

/// Seeded synthetic corpus: Zipf-distributed text tokens, optionally
/// prefixed in every sequence by a low-entropy block drawn from the two
/// reserved vision ids.
pub fn generate_calibration(params: &CalibGenParams) -> Result<CalibrationSet> {
    if params.vocab_size <= VISION_SYMBOLS + 1 {
        return Err(CaspError::invalid("vocab too small for generator"));
    }
    if !(0.0..1.0).contains(&params.vision_ratio) {
        return Err(CaspError::invalid("vision_ratio must be in [0, 1)"));
    }
    if params.sample_count == 0 || params.seq_len == 0 {
        return Err(CaspError::invalid("empty calibration requested"));
    }
    let text_vocab = params.vocab_size - VISION_SYMBOLS;
    let zipf = Zipf::new(text_vocab as f64, params.zipf_s)
        .map_err(|e| CaspError::invalid(format!("zipf: {e}")))?;
    let vision_prefix = (params.vision_ratio * params.seq_len as f64).floor() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let mut sequences = Vec::with_capacity(params.sample_count);
    for _ in 0..params.sample_count {
        let mut seq: Vec<u32> = Vec::with_capacity(params.seq_len);
        for pos in 0..params.seq_len {
            if pos < vision_prefix {
                // Heavily skewed two-symbol block.
                let sym = if rng.random::<f64>() < 0.97 { 1 } else { 2 };
                seq.push((params.vocab_size - sym) as u32);
            } else if pos > vision_prefix && rng.random::<f64>() < params.repeat_p {
                seq.push(seq[pos - 1]);
            } else {
                let v: f64 = zipf.sample(&mut rng);
                seq.push(v as u32 - 1);
            }
        }
        sequences.push(seq);
    }
    CalibrationSet::new(sequences, params.seq_len, vision_prefix)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let p = CalibGenParams::new(64, 8, 16, 42).with_vision_ratio(0.25);
        let a = generate_calibration(&p).unwrap();
        let b = generate_calibration(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vision_prefix, 4);
        assert_eq!(a.sample_count(), 8);
    }

    #[test]
    fn vision_block_uses_reserved_ids() {
        let p = CalibGenParams::new(64, 4, 16, 7).with_vision_ratio(0.5);
        let c = generate_calibration(&p).unwrap();
        for seq in &c.sequences {
            for &t in &seq[..c.vision_prefix] {
                assert!(t as usize >= 62);
            }
            for &t in &seq[c.vision_prefix..] {
                assert!((t as usize) < 62);
            }
        }
    }

    #[test]
    fn token_ids_below_vocab() {
        let p = CalibGenParams::new(64, 16, 32, 3);
        let c = generate_calibration(&p).unwrap();
        c.check_vocab(64).unwrap();
        assert!(c.check_vocab(8).is_err());
    }

    #[test]
    fn kinds_follow_prefix() {
        let p = CalibGenParams::new(64, 2, 8, 1).with_vision_ratio(0.25);
        let c = generate_calibration(&p).unwrap();
        let kinds = c.token_kinds();
        assert_eq!(kinds[0], TokenKind::Vision);
        assert_eq!(kinds[1], TokenKind::Vision);
        assert_eq!(kinds[2], TokenKind::Text);
    }
}
