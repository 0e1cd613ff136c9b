//! Codebook vector quantization.
//!
//! Each row is zero-padded to a multiple of the vector dim `g` and split
//! into g-vectors; a `2^(n*g)`-entry codebook is learned by seeded k-means
//! (k-means++ init, 25 iteration cap, relative-shift tolerance 1e-6,
//! empty-cluster repair by splitting the largest cluster). Centroids are
//! snapped to f16 before the final assignment so stored and in-memory
//! codebooks are identical.

use crate::error::{CaspError, Result};
use crate::f16util;
use crate::model::tensor::Tensor;
use crate::quant::{Codebook, QuantScheme, QuantizedTensor};
use crate::runtime::{self, ExecMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const KMEANS_MAX_ITERS: usize = 25;
const KMEANS_REL_TOL: f64 = 1e-6;

pub fn quantize_vq(w: &Tensor, n_bits: u8, vec_dim: u32, seed: u64) -> Result<QuantizedTensor> {
    quantize_vq_mode(w, n_bits, vec_dim, seed, ExecMode::default())
}

pub fn quantize_vq_mode(
    w: &Tensor,
    n_bits: u8,
    vec_dim: u32,
    seed: u64,
    mode: ExecMode,
) -> Result<QuantizedTensor> {
    if n_bits == 0 || vec_dim == 0 {
        return Err(CaspError::invalid("n_bits and vec_dim must be positive"));
    }
    let code_bits = n_bits as u32 * vec_dim;
    if code_bits > 16 {
        return Err(CaspError::invalid(format!(
            "n_bits*vec_dim = {code_bits} exceeds 16 (codebook would exceed 65536 entries)"
        )));
    }
    if !w.is_finite() {
        return Err(CaspError::invalid("weights contain non-finite values"));
    }

    let g = vec_dim as usize;
    let k = 1usize << code_bits;
    let (rows, cols) = (w.rows(), w.cols());
    let padded = cols.div_ceil(g) * g;
    let per_row = padded / g;
    let n_vectors = rows * per_row;

    // Extract padded g-vectors in row-major order.
    let mut vectors = vec![0.0f64; n_vectors * g];
    for r in 0..rows {
        for c in 0..cols {
            let flat = r * padded + c;
            vectors[flat] = f64::from(w.get(r, c));
        }
    }
    let vec_at = |i: usize| &vectors[i * g..(i + 1) * g];

    // If the distinct vectors fit in the codebook, use them directly
    // (padded with duplicates) and quantization is exact.
    let mut distinct: Vec<usize> = Vec::new();
    let mut seen_all = true;
    'outer: for i in 0..n_vectors {
        for &j in &distinct {
            if vec_at(i) == vec_at(j) {
                continue 'outer;
            }
        }
        if distinct.len() == k {
            seen_all = false;
            break;
        }
        distinct.push(i);
    }

    let centroids: Vec<f64> = if seen_all {
        let mut cb = Vec::with_capacity(k * g);
        for &i in &distinct {
            cb.extend_from_slice(vec_at(i));
        }
        // Pad with duplicates of the first entry.
        while cb.len() < k * g {
            let src = cb[..g].to_vec();
            cb.extend_from_slice(&src);
        }
        cb
    } else {
        kmeans(&vectors, n_vectors, g, k, seed, mode)
    };

    // Snap to f16 and assign against the stored codebook.
    let entries: Vec<u16> = centroids.iter().map(|&v| f16util::to_bits(v as f32)).collect();
    let snapped: Vec<f64> = entries
        .iter()
        .map(|&b| f64::from(f16util::from_bits(b)))
        .collect();
    let indices: Vec<u32> = runtime::map_range(mode, n_vectors, |i| {
        nearest_centroid(vec_at(i), &snapped, g) as u32
    });

    Ok(QuantizedTensor {
        scheme: QuantScheme::Vq,
        n_bits,
        group_size: vec_dim,
        rows: rows as u32,
        cols: cols as u32,
        indices,
        scales: Vec::new(),
        zeros: Vec::new(),
        codebook: Some(Codebook {
            n_bits,
            vec_dim,
            entries,
        }),
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(v: &[f64], centroids: &[f64], g: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (ci, chunk) in centroids.chunks(g).enumerate() {
        let d = dist2(v, chunk);
        if d < best_d {
            best_d = d;
            best = ci;
        }
    }
    best
}

/// Seeded k-means over the g-vectors. Assignment distances fan out over the
/// execution mode; accumulation runs in fixed index order so results are
/// identical for any thread count.
fn kmeans(
    vectors: &[f64],
    n_vectors: usize,
    g: usize,
    k: usize,
    seed: u64,
    mode: ExecMode,
) -> Vec<f64> {
    let vec_at = |i: usize| &vectors[i * g..(i + 1) * g];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = vectors.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);

    // k-means++ init: seeded first pick, then farthest-point-weighted picks.
    let mut centroids = vec![0.0f64; k * g];
    let first = rng.random_range(0..n_vectors);
    centroids[..g].copy_from_slice(vec_at(first));
    let mut min_d2: Vec<f64> = runtime::map_range(mode, n_vectors, |i| dist2(vec_at(i), &centroids[..g]));
    for ci in 1..k {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total <= 0.0 {
            // All points coincide with existing centroids.
            rng.random_range(0..n_vectors)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n_vectors - 1;
            for (i, &d) in min_d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        let (dst, src) = (ci * g, chosen * g);
        centroids[dst..dst + g].copy_from_slice(&vectors[src..src + g]);
        let new_c = centroids[dst..dst + g].to_vec();
        let updates = runtime::map_range(mode, n_vectors, |i| dist2(vec_at(i), &new_c));
        for (m, u) in min_d2.iter_mut().zip(updates) {
            *m = m.min(u);
        }
    }

    let mut assign = vec![0usize; n_vectors];
    for _iter in 0..KMEANS_MAX_ITERS {
        let cb = centroids.clone();
        let new_assign: Vec<usize> =
            runtime::map_range(mode, n_vectors, |i| nearest_centroid(vec_at(i), &cb, g));
        assign = new_assign;

        let mut sums = vec![0.0f64; k * g];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * g..(a + 1) * g].iter_mut().zip(vec_at(i)) {
                *s += v;
            }
        }

        // Empty-cluster repair: split the largest cluster at its farthest
        // member (deterministic tie-break by index).
        for ci in 0..k {
            if counts[ci] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&c| counts[c]).unwrap();
            if counts[largest] <= 1 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for (i, &a) in assign.iter().enumerate() {
                if a != largest {
                    continue;
                }
                let d = dist2(vec_at(i), &centroids[largest * g..(largest + 1) * g]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                for (s, v) in sums[largest * g..(largest + 1) * g]
                    .iter_mut()
                    .zip(vec_at(i))
                {
                    *s -= v;
                }
                counts[largest] -= 1;
                sums[ci * g..(ci + 1) * g].copy_from_slice(vec_at(i));
                counts[ci] = 1;
                assign[i] = ci;
            }
        }

        let mut max_shift2 = 0.0f64;
        for ci in 0..k {
            if counts[ci] == 0 {
                continue;
            }
            let inv = 1.0 / counts[ci] as f64;
            for j in 0..g {
                let new_v = sums[ci * g + j] * inv;
                let delta = new_v - centroids[ci * g + j];
                max_shift2 = max_shift2.max(delta * delta);
                centroids[ci * g + j] = new_v;
            }
        }
        if max_shift2.sqrt() <= KMEANS_REL_TOL * scale {
            break;
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, effective_bits};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn covering_codebook_is_exact() {
        // g=2, n=2 -> 16 entries; data uses 4 distinct f16-exact vectors.
        let pats: [[f32; 2]; 4] = [[0.5, -1.0], [0.25, 0.75], [-0.5, 0.0], [1.0, 1.0]];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..32 {
            let p = pats[rng.random_range(0..4)];
            data.extend_from_slice(&p);
        }
        let t = Tensor::new(8, 8, data.clone()).unwrap();
        let qt = quantize_vq(&t, 2, 2, 7).unwrap();
        let back = dequantize(&qt).unwrap();
        assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn codebook_entry_count_is_forced() {
        let t = Tensor::new(32, 32, vec![0.1; 1024]).unwrap();
        let qt = quantize_vq(&t, 2, 8, 1).unwrap();
        assert_eq!(qt.codebook.as_ref().unwrap().entry_count(), 65536);
        let eb = effective_bits(&qt);
        assert!(eb.codebook_dominates, "65536x8 f16 codebook outweighs a 32x32 tensor");
    }

    #[test]
    fn bits_times_dim_capped() {
        let t = Tensor::new(4, 8, vec![0.0; 32]).unwrap();
        assert!(quantize_vq(&t, 3, 8, 1).is_err());
    }

    #[test]
    fn kmeans_path_deterministic_across_modes() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let data: Vec<f32> = (0..512).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let t = Tensor::new(16, 32, data).unwrap();
        let a = quantize_vq_mode(&t, 2, 4, 23, ExecMode::Parallel).unwrap();
        let b = quantize_vq_mode(&t, 2, 4, 23, ExecMode::Sequential).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.codebook.as_ref().unwrap().entries, b.codebook.as_ref().unwrap().entries);
    }

    #[test]
    fn padding_rule_reconstructs_true_cols() {
        let t = Tensor::new(3, 5, (0..15).map(|i| i as f32 / 8.0).collect()).unwrap();
        let qt = quantize_vq(&t, 2, 4, 5).unwrap();
        assert_eq!(qt.padded_cols(), 8);
        let back = dequantize(&qt).unwrap();
        assert_eq!(back.rows(), 3);
        assert_eq!(back.cols(), 5);
    }
}
