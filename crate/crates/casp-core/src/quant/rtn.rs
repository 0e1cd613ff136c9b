//! Round-to-nearest grid quantization with per-group asymmetric min-max
//! grids.

use crate::error::{CaspError, Result};
use crate::f16util;
use crate::model::tensor::Tensor;
use crate::quant::{QuantScheme, QuantizedTensor};

pub(crate) const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Stored grid for one group: dequantized value is `zero + scale * index`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GridParams {
    pub scale_bits: u16,
    pub zero_bits: u16,
}

impl GridParams {
    pub fn scale(&self) -> f64 {
        f64::from(f16util::from_bits(self.scale_bits))
    }

    pub fn zero(&self) -> f64 {
        f64::from(f16util::from_bits(self.zero_bits))
    }
}

/// Fit the stored grid to a group of values. The scale is rounded up to the
/// next f16 and the zero point down, so the stored grid spans the group and
/// nearest-level rounding keeps per-element error within half a stored step.
/// A constant group stores scale 0 and the value itself as the zero point.
pub(crate) fn grid_for_group(vals: &[f64], n_bits: u8) -> GridParams {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return GridParams {
            scale_bits: f16util::to_bits(0.0),
            zero_bits: f16util::to_bits(lo as f32),
        };
    }
    let levels = (1u32 << n_bits) - 1;
    let scale = ((hi - lo) / f64::from(levels)) as f32;
    GridParams {
        scale_bits: f16util::to_bits(f16util::snap_up(scale)),
        zero_bits: f16util::to_bits(f16util::snap_down(lo as f32)),
    }
}

/// Nearest stored grid level for a single value.
pub(crate) fn quantize_value(v: f64, grid: GridParams, n_bits: u8) -> u32 {
    let scale = grid.scale();
    if scale <= 0.0 {
        return 0;
    }
    let max_level = (1u32 << n_bits) - 1;
    let q = ((v - grid.zero()) / scale).round();
    q.clamp(0.0, f64::from(max_level)) as u32
}

/// Map each value to its nearest stored grid level.
pub(crate) fn quantize_group_into(vals: &[f64], grid: GridParams, n_bits: u8, out: &mut Vec<u32>) {
    for &v in vals {
        out.push(quantize_value(v, grid, n_bits));
    }
}

/// Round-to-nearest quantization over groups of `group_size` consecutive
/// weights in row-major order (the last group may be short).
pub fn quantize_rtn(w: &Tensor, n_bits: u8, group_size: u32) -> Result<QuantizedTensor> {
    if !SUPPORTED_BITS.contains(&n_bits) {
        return Err(CaspError::invalid(format!(
            "n_bits {n_bits} not in {{2,3,4,8}}"
        )));
    }
    if group_size == 0 {
        return Err(CaspError::invalid("group_size must be positive"));
    }
    if !w.is_finite() {
        return Err(CaspError::invalid("weights contain non-finite values"));
    }
    let vals: Vec<f64> = w.data().iter().map(|&v| f64::from(v)).collect();
    let g = group_size as usize;
    let mut indices = Vec::with_capacity(vals.len());
    let mut scales = Vec::new();
    let mut zeros = Vec::new();
    for chunk in vals.chunks(g) {
        let grid = grid_for_group(chunk, n_bits);
        scales.push(grid.scale_bits);
        zeros.push(grid.zero_bits);
        quantize_group_into(chunk, grid, n_bits, &mut indices);
    }
    Ok(QuantizedTensor {
        scheme: QuantScheme::Rtn,
        n_bits,
        group_size,
        rows: w.rows() as u32,
        cols: w.cols() as u32,
        indices,
        scales,
        zeros,
        codebook: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, effective_bits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn grid_aligned_weights_are_fixed_points() {
        // 2-bit grid with f16-exact scale 0.5: {-1, -0.5, 0, 0.5}
        let vals = vec![-1.0f32, -0.5, 0.0, 0.5, 0.5, -1.0, 0.0, -0.5];
        let t = Tensor::new(2, 4, vals.clone()).unwrap();
        let qt = quantize_rtn(&t, 2, 4).unwrap();
        let back = dequantize(&qt).unwrap();
        assert_eq!(back.data(), &vals[..]);

        // Re-quantizing the reconstruction yields identical indices.
        let qt2 = quantize_rtn(&back, 2, 4).unwrap();
        assert_eq!(qt.indices, qt2.indices);
        assert_eq!(qt.scales, qt2.scales);
        assert_eq!(qt.zeros, qt2.zeros);
    }

    #[test]
    fn nearest_grid_point_chosen() {
        // Single group spanning [-1, 1]; 2-bit grid levels {-1, -1/3, 1/3, 1}
        // (stored at f16). 0.3 is nearest to 1/3.
        let t = Tensor::new(1, 4, vec![-1.0, 1.0, 0.3, 0.0]).unwrap();
        let qt = quantize_rtn(&t, 2, 4).unwrap();
        let back = dequantize(&qt).unwrap();
        let third = f64::from(back.data()[2]);
        assert!((third - 1.0 / 3.0).abs() < 2e-3, "got {third}");
        assert_eq!(qt.indices[0], 0);
        assert_eq!(qt.indices[1], 3);
        assert_eq!(qt.indices[2], 2);
    }

    #[test]
    fn half_step_bound_seed11() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let vals: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let t = Tensor::new(1, 256, vals.clone()).unwrap();
        let qt = quantize_rtn(&t, 3, 128).unwrap();
        let back = dequantize(&qt).unwrap();
        for (grp, chunk) in vals.chunks(128).enumerate() {
            let lo = chunk.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
            let hi = chunk.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let step = (hi - lo) / 7.0;
            for (i, &v) in chunk.iter().enumerate() {
                let err = (f64::from(v) - f64::from(back.data()[grp * 128 + i])).abs();
                // Half a step plus the f16 rounding of the stored params.
                assert!(err <= step / 2.0 + step * 6e-4 + 1e-9, "err {err} step {step}");
            }
        }
    }

    #[test]
    fn constant_group_stores_zero_scale() {
        let t = Tensor::new(1, 4, vec![0.75; 4]).unwrap();
        let qt = quantize_rtn(&t, 2, 4).unwrap();
        assert_eq!(qt.scales[0], f16util::to_bits(0.0));
        let back = dequantize(&qt).unwrap();
        assert_eq!(back.data(), &[0.75; 4]);
    }

    #[test]
    fn effective_bits_accounting() {
        let t = Tensor::new(2, 128, vec![0.1; 256]).unwrap();
        let qt = quantize_rtn(&t, 2, 128).unwrap();
        let eb = effective_bits(&qt);
        assert_eq!(eb.bits_per_weight, 2.0 + 32.0 / 128.0);
        assert!(!eb.codebook_dominates);
    }

    #[test]
    fn unsupported_bits_rejected() {
        let t = Tensor::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(quantize_rtn(&t, 5, 4).is_err());
    }
}
