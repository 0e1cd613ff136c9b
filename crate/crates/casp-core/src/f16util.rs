//! Half-precision helpers for stored quantization parameters.
//!
//! Grid scales, zero points, and VQ codebook entries are stored at 16-bit
//! precision. Snapping happens at creation time so the in-memory values and
//! the serialized values are the same bits.

use half::f16;

/// Nearest f16, returned as f32.
pub fn snap(x: f32) -> f32 {
    f16::from_f32(x).to_f32()
}

pub fn to_bits(x: f32) -> u16 {
    f16::from_f32(x).to_bits()
}

pub fn from_bits(b: u16) -> f32 {
    f16::from_bits(b).to_f32()
}

/// Smallest f16 value >= x (saturates at f16::MAX).
pub fn snap_up(x: f32) -> f32 {
    let h = f16::from_f32(x);
    let hf = h.to_f32();
    if hf >= x || h.is_infinite() {
        hf.min(f16::MAX.to_f32())
    } else {
        next_toward_pos(h).to_f32().min(f16::MAX.to_f32())
    }
}

/// Largest f16 value <= x (saturates at f16::MIN).
pub fn snap_down(x: f32) -> f32 {
    let h = f16::from_f32(x);
    let hf = h.to_f32();
    if hf <= x || h.is_infinite() {
        hf.max(f16::MIN.to_f32())
    } else {
        next_toward_neg(h).to_f32().max(f16::MIN.to_f32())
    }
}

fn next_toward_pos(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x8000 != 0 {
        // negative: move toward zero
        if bits == 0x8000 {
            f16::from_bits(0x0001)
        } else {
            f16::from_bits(bits - 1)
        }
    } else {
        f16::from_bits(bits + 1)
    }
}

fn next_toward_neg(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x8000 != 0 {
        f16::from_bits(bits + 1)
    } else if bits == 0x0000 {
        f16::from_bits(0x8001)
    } else {
        f16::from_bits(bits - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snap_up_bounds_from_above() {
        for &x in &[0.1f32, 0.6667, -0.3, 1.0, 3.14159, 1e-5, -2.71828, 1000.3] {
            let up = snap_up(x);
            assert!(up >= x, "snap_up({x}) = {up}");
            assert_eq!(up, snap(up), "result must be f16-representable");
        }
    }

    #[test]
    fn snap_down_bounds_from_below() {
        for &x in &[0.1f32, 0.6667, -0.3, 1.0, 3.14159, 1e-5, -2.71828, 1000.3] {
            let down = snap_down(x);
            assert!(down <= x, "snap_down({x}) = {down}");
            assert_eq!(down, snap(down));
        }
    }

    #[test]
    fn exact_values_pass_through() {
        for &x in &[0.0f32, 0.5, -1.0, 0.25, 2.0, -0.125] {
            assert_eq!(snap_up(x), x);
            assert_eq!(snap_down(x), x);
            assert_eq!(snap(x), x);
        }
    }

    #[test]
    fn bits_round_trip() {
        let x = 0.333f32;
        assert_eq!(from_bits(to_bits(x)), snap(x));
    }
}
