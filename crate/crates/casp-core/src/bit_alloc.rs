//! Block Influence scoring and entropic-regularized bit allocation.
//!
//! The continuous allocation maximizes `sum_l s_l b_l p_l + mu * sum_l H(b_l)`
//! with `H(b) = -b ln b` subject to `(1/P) sum_l b_l p_l = B_avg`. The
//! objective is strictly concave, so the stationary point
//! `b_l = exp((s_l p_l - mu - lambda p_l / P) / mu)` is the unique maximum.
//! With equal `p_l` the multiplier folds into the softmax normalization
//! (`b_l = (P B / p) softmax(s_l p / mu)`); otherwise lambda is solved by
//! monotone bisection on the budget constraint.

use crate::error::{CaspError, Result};
use crate::model::forward::ActivationBatch;
use serde::{Deserialize, Serialize};

/// Per-layer Block Influence scores `s_l = 1 - mean cos(x_in, x_out)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerImportance {
    pub scores: Vec<f64>,
}

impl LayerImportance {
    pub fn layer_count(&self) -> usize {
        self.scores.len()
    }
}

/// Result of scoring one layer.
#[derive(Debug, Clone, Copy)]
pub struct BlockInfluence {
    pub score: f64,
    /// Rows skipped because one side had zero norm.
    pub skipped_rows: usize,
}

/// One minus the mean cosine similarity between matching rows of the block
/// input and output.
pub fn block_influence(x_in: &ActivationBatch, x_out: &ActivationBatch) -> Result<BlockInfluence> {
    let (a, b) = (&x_in.x, &x_out.x);
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(CaspError::invalid("activation batches shape mismatch"));
    }
    if a.nrows() == 0 {
        return Err(CaspError::invalid("no rows"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..a.nrows() {
        let (ra, rb) = (a.row(i), b.row(i));
        let (na, nb) = (ra.norm(), rb.norm());
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        sum += ra.dot(&rb) / (na * nb);
        used += 1;
    }
    if used == 0 {
        return Err(CaspError::invalid("all rows have zero norm"));
    }
    Ok(BlockInfluence {
        score: 1.0 - sum / used as f64,
        skipped_rows: skipped,
    })
}

/// A bit allocation: continuous solve, optional integer rounding, and the
/// quantities that define the problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BitPlan {
    pub bits_cont: Vec<f64>,
    pub bits_int: Option<Vec<u32>>,
    pub params: Vec<f64>,
    pub total_params: f64,
    pub target: f64,
    pub mu: f64,
    pub lambda: f64,
    /// `sum s_l b_l p_l + mu sum H(b_l)` at the continuous plan.
    pub objective_value: f64,
}

impl BitPlan {
    /// `(1/P) sum b_l p_l` of the continuous plan.
    pub fn weighted_average(&self) -> f64 {
        weighted_average(&self.bits_cont, &self.params, self.total_params)
    }

    /// Weighted average of the integer plan, if rounded.
    pub fn weighted_average_int(&self) -> Option<f64> {
        self.bits_int.as_ref().map(|bits| {
            let cont: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
            weighted_average(&cont, &self.params, self.total_params)
        })
    }
}

fn weighted_average(bits: &[f64], params: &[f64], total: f64) -> f64 {
    bits.iter()
        .zip(params)
        .map(|(b, p)| b * p)
        .sum::<f64>()
        / total
}

pub fn objective(bits: &[f64], scores: &[f64], params: &[f64], mu: f64) -> f64 {
    let mut v = 0.0;
    for ((&b, &s), &p) in bits.iter().zip(scores).zip(params) {
        v += s * b * p + mu * (-b * b.ln());
    }
    v
}

/// Closed-form continuous allocation. `total_params` defaults to
/// `sum(params)`; passing the pre-compression parameter total makes savings
/// from low-rank slots fund extra bits.
pub fn allocate_bits(
    scores: &LayerImportance,
    params: &[f64],
    b_avg: f64,
    mu: f64,
    total_params: Option<f64>,
) -> Result<BitPlan> {
    let l = scores.layer_count();
    if l == 0 || params.len() != l {
        return Err(CaspError::invalid("scores and params must align and be non-empty"));
    }
    if mu <= 0.0 {
        return Err(CaspError::invalid("mu must be positive"));
    }
    if b_avg <= 0.0 {
        return Err(CaspError::invalid("b_avg must be positive"));
    }
    if params.iter().any(|&p| p <= 0.0) {
        return Err(CaspError::invalid("params must be positive"));
    }
    let p_total = total_params.unwrap_or_else(|| params.iter().sum());
    if p_total <= 0.0 {
        return Err(CaspError::invalid("total params must be positive"));
    }

    let equal_p = params.windows(2).all(|w| w[0] == w[1]);
    let (bits, lambda) = if equal_p {
        let p = params[0];
        // Stable softmax of s_l p / mu.
        let t: Vec<f64> = scores.scores.iter().map(|&s| s * p / mu).collect();
        let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let scale = p_total * b_avg / p;
        let bits: Vec<f64> = exps.iter().map(|&e| scale * e / sum).collect();
        // lambda consistent with b_l = exp((s p - mu - lambda p / P) / mu):
        // ln(scale/sum) - m = -(mu + lambda p / P)/mu
        let ln_k = (scale / sum).ln() - m;
        let lambda = -(ln_k + 1.0) * mu * p_total / p;
        (bits, lambda)
    } else {
        let lambda = solve_lambda(&scores.scores, params, b_avg, mu, p_total)?;
        let bits: Vec<f64> = scores
            .scores
            .iter()
            .zip(params)
            .map(|(&s, &p)| ((s * p - mu - lambda * p / p_total) / mu).exp())
            .collect();
        (bits, lambda)
    };

    let objective_value = objective(&bits, &scores.scores, params, mu);
    let plan = BitPlan {
        bits_cont: bits,
        bits_int: None,
        params: params.to_vec(),
        total_params: p_total,
        target: b_avg,
        mu,
        lambda,
        objective_value,
    };
    let avg = plan.weighted_average();
    if ((avg - b_avg) / b_avg).abs() > 1e-9 {
        return Err(CaspError::numerical(format!(
            "budget constraint missed: average {avg} vs target {b_avg}"
        )));
    }
    Ok(plan)
}

/// Bisection on the monotone budget residual, in log space for stability.
fn solve_lambda(scores: &[f64], params: &[f64], b_avg: f64, mu: f64, p_total: f64) -> Result<f64> {
    // log g(lambda) where g = (1/P) sum p_l exp((s_l p_l - mu - lambda p_l/P)/mu)
    let log_g = |lambda: f64| -> f64 {
        let mut m = f64::NEG_INFINITY;
        let t: Vec<f64> = scores
            .iter()
            .zip(params)
            .map(|(&s, &p)| {
                let v = (s * p - mu - lambda * p / p_total) / mu;
                m = m.max(v);
                v
            })
            .collect();
        let sum: f64 = t
            .iter()
            .zip(params)
            .map(|(&v, &p)| (p / p_total) * (v - m).exp())
            .sum();
        m + sum.ln()
    };
    let target = b_avg.ln();

    let mut lo = 0.0;
    let mut hi = 0.0;
    if log_g(0.0) >= target {
        // g decreasing in lambda: search upward for the upper bracket.
        hi = 1.0;
        while log_g(hi) > target {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(CaspError::numerical("bisection bracket expansion failed (hi)"));
            }
        }
    } else {
        lo = -1.0;
        while log_g(lo) < target {
            lo *= 2.0;
            if lo < -1e300 {
                return Err(CaspError::numerical("bisection bracket expansion failed (lo)"));
            }
        }
    }
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        if log_g(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= f64::EPSILON * (1.0 + lo.abs() + hi.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Greedy integer rounding: layers sorted by continuous bits descending
/// (ties by index ascending) take the highest allowed bit while the weighted
/// average stays within the target; the rest take the lowest.
pub fn round_bits(plan: &BitPlan, allowed: &[u32]) -> Result<BitPlan> {
    if allowed.is_empty() {
        return Err(CaspError::invalid("allowed bit set is empty"));
    }
    let lo = *allowed.iter().min().unwrap();
    let hi = *allowed.iter().max().unwrap();
    if f64::from(lo) > plan.target {
        return Err(CaspError::invalid(format!(
            "infeasible: minimum allowed bit {lo} exceeds target average {}",
            plan.target
        )));
    }
    let l = plan.bits_cont.len();

    // Already representable: keep as is.
    if plan
        .bits_cont
        .iter()
        .all(|b| allowed.iter().any(|&a| (b - f64::from(a)).abs() < 1e-12))
        && plan.weighted_average() <= plan.target + 1e-12
    {
        let bits_int: Vec<u32> = plan.bits_cont.iter().map(|&b| b.round() as u32).collect();
        let mut out = plan.clone();
        out.bits_int = Some(bits_int);
        return Ok(out);
    }

    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        plan.bits_cont[b]
            .partial_cmp(&plan.bits_cont[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    round_with_order(plan, lo, hi, &order)
}

/// Same budget rule as [`round_bits`] but upgrading layers in a caller-chosen
/// order (used by the random-allocation ablation baseline).
pub fn round_bits_with_order(plan: &BitPlan, allowed: &[u32], order: &[usize]) -> Result<BitPlan> {
    if allowed.is_empty() {
        return Err(CaspError::invalid("allowed bit set is empty"));
    }
    let lo = *allowed.iter().min().unwrap();
    let hi = *allowed.iter().max().unwrap();
    if f64::from(lo) > plan.target {
        return Err(CaspError::invalid("infeasible allowed set"));
    }
    round_with_order(plan, lo, hi, order)
}

fn round_with_order(plan: &BitPlan, lo: u32, hi: u32, order: &[usize]) -> Result<BitPlan> {
    let l = plan.bits_cont.len();
    if order.len() != l {
        return Err(CaspError::invalid("order must cover every layer"));
    }
    let mut bits = vec![lo; l];
    let base: f64 = plan
        .params
        .iter()
        .map(|p| f64::from(lo) * p)
        .sum::<f64>();
    let mut mass = base;
    for &idx in order {
        let upgraded = mass + f64::from(hi - lo) * plan.params[idx];
        if upgraded / plan.total_params <= plan.target + 1e-12 {
            bits[idx] = hi;
            mass = upgraded;
        } else {
            break;
        }
    }
    let mut out = plan.clone();
    out.bits_int = Some(bits);
    Ok(out)
}

/// Brute-force grid maximizer of the regularized objective under the exact
/// budget, used as a test oracle. Parameters are given in integer units;
/// the grid has step `grid_step` and the budget `B_avg * sum(params) /
/// grid_step` must land on an integer. Dynamic programming over budget units
/// finds the exact grid optimum for L up to 6.
pub fn alloc_oracle(
    scores: &LayerImportance,
    params_units: &[u64],
    b_avg: f64,
    mu: f64,
    grid_step: f64,
) -> Result<BitPlan> {
    let l = scores.layer_count();
    if l == 0 || params_units.len() != l {
        return Err(CaspError::invalid("scores and params must align"));
    }
    if l > 6 {
        return Err(CaspError::invalid("oracle limited to L <= 6"));
    }
    if mu <= 0.0 || b_avg <= 0.0 || grid_step <= 0.0 {
        return Err(CaspError::invalid("b_avg, mu, grid_step must be positive"));
    }
    if params_units.iter().any(|&p| p == 0) {
        return Err(CaspError::invalid("params must be positive"));
    }
    let p_total: u64 = params_units.iter().sum();
    let budget_f = b_avg * p_total as f64 / grid_step;
    let budget = budget_f.round();
    if (budget_f - budget).abs() > 1e-6 {
        return Err(CaspError::invalid(
            "B_avg * P / grid_step must be an integer for the exact-budget grid",
        ));
    }
    let budget = budget as usize;

    // dp[r] = best objective with a prefix of layers consuming exactly r
    // units (unit = grid_step * one param). usize::MAX marks unreachable.
    const NEG: f64 = f64::NEG_INFINITY;
    let mut dp = vec![NEG; budget + 1];
    let mut choice = vec![vec![0usize; budget + 1]; l];
    dp[0] = 0.0;
    for (li, (&p, &s)) in params_units.iter().zip(&scores.scores).enumerate() {
        let p = p as usize;
        let mut next = vec![NEG; budget + 1];
        let k_max = budget / p;
        for k in 1..=k_max {
            let b = k as f64 * grid_step;
            let contrib = s * b * p as f64 + mu * (-b * b.ln());
            let cost = k * p;
            for r in cost..=budget {
                let prev = dp[r - cost];
                if prev == NEG {
                    continue;
                }
                let v = prev + contrib;
                if v > next[r] {
                    next[r] = v;
                    choice[li][r] = k;
                }
            }
        }
        dp = next;
    }
    if dp[budget] == NEG {
        return Err(CaspError::numerical("no grid point satisfies the budget exactly"));
    }

    // Reconstruct the argmax.
    let mut bits = vec![0.0f64; l];
    let mut r = budget;
    for li in (0..l).rev() {
        let k = choice[li][r];
        bits[li] = k as f64 * grid_step;
        r -= k * params_units[li] as usize;
    }

    let params_f: Vec<f64> = params_units.iter().map(|&p| p as f64).collect();
    let objective_value = objective(&bits, &scores.scores, &params_f, mu);
    Ok(BitPlan {
        bits_cont: bits,
        bits_int: None,
        params: params_f,
        total_params: p_total as f64,
        target: b_avg,
        mu,
        lambda: 0.0,
        objective_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::model::calibration::TokenKind;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(x: Mat) -> ActivationBatch {
        let kinds = vec![TokenKind::Text; x.nrows()];
        ActivationBatch { x, token_kinds: kinds }
    }

    #[test]
    fn influence_extremes() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x = Mat::from_fn(8, 4, |_, _| StandardNormal.sample(&mut rng));
        let same = block_influence(&batch(x.clone()), &batch(x.clone())).unwrap();
        assert_relative_eq!(same.score, 0.0, epsilon = 1e-12);
        let flipped = block_influence(&batch(x.clone()), &batch(-x)).unwrap();
        assert_relative_eq!(flipped.score, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn influence_matches_scalar_loop_seed41() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let a = Mat::from_fn(64, 8, |_, _| StandardNormal.sample(&mut rng));
        let b = Mat::from_fn(64, 8, |_, _| StandardNormal.sample(&mut rng));
        let got = block_influence(&batch(a.clone()), &batch(b.clone())).unwrap();
        let mut acc = 0.0;
        for i in 0..64 {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for c in 0..8 {
                dot += a[(i, c)] * b[(i, c)];
                na += a[(i, c)] * a[(i, c)];
                nb += b[(i, c)] * b[(i, c)];
            }
            acc += dot / (na.sqrt() * nb.sqrt());
        }
        assert_relative_eq!(got.score, 1.0 - acc / 64.0, epsilon = 1e-7);
    }

    #[test]
    fn zero_rows_skipped_with_count() {
        let mut a = Mat::from_element(4, 3, 1.0);
        a.set_row(2, &nalgebra::RowDVector::zeros(3).into());
        let b = Mat::from_element(4, 3, 2.0);
        let r = block_influence(&batch(a), &batch(b)).unwrap();
        assert_eq!(r.skipped_rows, 1);
        let all_zero = Mat::zeros(4, 3);
        assert!(block_influence(&batch(all_zero.clone()), &batch(all_zero)).is_err());
    }

    #[test]
    fn equal_everything_gives_target() {
        let scores = LayerImportance { scores: vec![0.7; 5] };
        let params = vec![1000.0; 5];
        let plan = allocate_bits(&scores, &params, 2.0, 0.3, None).unwrap();
        for &b in &plan.bits_cont {
            assert_relative_eq!(b, 2.0, epsilon = 1e-12);
        }
        // All entries are products of identical floats: bitwise equal.
        assert!(plan.bits_cont.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn huge_mu_flattens() {
        let scores = LayerImportance { scores: vec![0.1, 0.9, 1.7, 0.4] };
        let params = vec![1.0; 4];
        let plan = allocate_bits(&scores, &params, 2.0, 1e6, None).unwrap();
        for &b in &plan.bits_cont {
            assert!((b - 2.0).abs() <= 1e-3, "b = {b}");
        }
    }

    #[test]
    fn tiny_mu_concentrates_on_top_layer() {
        let scores = LayerImportance { scores: vec![0.2, 1.4, 0.6] };
        let params = vec![10.0, 10.0, 10.0];
        let range: f64 = 14.0 - 2.0;
        let plan = allocate_bits(&scores, &params, 2.0, 1e-4 * range, None).unwrap();
        // Top layer absorbs essentially the whole budget P*B/p_top.
        let expect = 30.0 * 2.0 / 10.0;
        assert_relative_eq!(plan.bits_cont[1], expect, epsilon = 1e-3);
    }

    #[test]
    fn budget_exact_with_unequal_params() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..50 {
            let l = rng.random_range(2..=8);
            let scores = LayerImportance {
                scores: (0..l).map(|_| rng.random_range(0.0..2.0)).collect(),
            };
            let params: Vec<f64> = (0..l)
                .map(|_| rng.random_range(500.0..20_000.0f64).round())
                .collect();
            let b_avg = rng.random_range(1.5..4.0);
            // mu scaled to the score-param products so the closed-form
            // exponentials stay within f64 range.
            let sp_max = scores
                .scores
                .iter()
                .zip(&params)
                .map(|(s, p)| s * p)
                .fold(0.0f64, f64::max);
            let mu = rng.random_range(0.02..2.0) * (sp_max + 1.0);
            let plan = allocate_bits(&scores, &params, b_avg, mu, None).unwrap();
            let avg = plan.weighted_average();
            assert!(((avg - b_avg) / b_avg).abs() <= 1e-9, "avg {avg} target {b_avg}");
            assert!(plan.bits_cont.iter().all(|&b| b > 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let scores = LayerImportance { scores: vec![0.3, 0.9, 1.2, 0.5] };
        let shifted = LayerImportance {
            scores: scores.scores.iter().map(|s| s + 0.75).collect(),
        };
        let params = vec![2048.0; 4];
        let a = allocate_bits(&scores, &params, 2.0, 0.2 * 2048.0, None).unwrap();
        let b = allocate_bits(&shifted, &params, 2.0, 0.2 * 2048.0, None).unwrap();
        for (x, y) in a.bits_cont.iter().zip(&b.bits_cont) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn monotone_in_scores_with_equal_params() {
        let scores = LayerImportance { scores: vec![0.2, 1.1, 0.7, 0.2] };
        let params = vec![100.0; 4];
        let plan = allocate_bits(&scores, &params, 2.0, 10.0, None).unwrap();
        assert!(plan.bits_cont[1] >= plan.bits_cont[2]);
        assert!(plan.bits_cont[2] >= plan.bits_cont[0]);
        assert_relative_eq!(plan.bits_cont[0], plan.bits_cont[3], epsilon = 1e-12);
    }

    #[test]
    fn closed_form_matches_grid_oracle_l3() {
        let scores = LayerImportance { scores: vec![0.1, 0.5, 0.4] };
        let params = vec![1.0; 3];
        let plan = allocate_bits(&scores, &params, 2.0, 0.1, None).unwrap();
        let oracle = alloc_oracle(&scores, &[1, 1, 1], 2.0, 0.1, 0.01).unwrap();
        for (c, g) in plan.bits_cont.iter().zip(&oracle.bits_cont) {
            assert!((c - g).abs() <= 0.01 + 1e-9, "closed {c} grid {g}");
        }
        assert!(plan.objective_value >= oracle.objective_value - 1e-9);
    }

    #[test]
    fn single_layer_pinned_by_constraint() {
        let scores = LayerImportance { scores: vec![1.3] };
        let oracle = alloc_oracle(&scores, &[4], 2.0, 0.5, 0.01).unwrap();
        assert_relative_eq!(oracle.bits_cont[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rounding_respects_budget_and_order() {
        let plan = BitPlan {
            bits_cont: vec![2.6, 2.4, 1.6, 1.4],
            bits_int: None,
            params: vec![1.0; 4],
            total_params: 4.0,
            target: 2.0,
            mu: 0.1,
            lambda: 0.0,
            objective_value: 0.0,
        };
        let rounded = round_bits(&plan, &[2, 3]).unwrap();
        // Upgrading any layer to 3 pushes the average to 2.25 > 2, so the
        // exhaustive optimum under the budget is all-2s.
        assert_eq!(rounded.bits_int.as_ref().unwrap(), &vec![2, 2, 2, 2]);

        // Exhaustive check over all 16 assignments.
        let scores = [2.6, 2.4, 1.6, 1.4]; // proportional to b_cont here
        let mut best = (f64::NEG_INFINITY, 0u32);
        for mask in 0..16u32 {
            let bits: Vec<f64> = (0..4)
                .map(|i| if mask >> i & 1 == 1 { 3.0 } else { 2.0 })
                .collect();
            let avg: f64 = bits.iter().sum::<f64>() / 4.0;
            if avg > 2.0 {
                continue;
            }
            let obj: f64 = bits.iter().zip(&scores).map(|(b, s)| b * s).sum();
            if obj > best.0 {
                best = (obj, mask);
            }
        }
        assert_eq!(best.1, 0, "all-2s is the exhaustive winner");
    }

    #[test]
    fn rounding_with_slack_upgrades_top_layers() {
        let plan = BitPlan {
            bits_cont: vec![2.6, 2.4, 1.6, 1.4],
            bits_int: None,
            params: vec![1.0; 4],
            total_params: 4.0,
            target: 2.25,
            mu: 0.1,
            lambda: 0.0,
            objective_value: 0.0,
        };
        let rounded = round_bits(&plan, &[2, 3]).unwrap();
        assert_eq!(rounded.bits_int.as_ref().unwrap(), &vec![3, 2, 2, 2]);
    }

    #[test]
    fn integer_valued_plan_unchanged() {
        let plan = BitPlan {
            bits_cont: vec![3.0, 2.0, 2.0],
            bits_int: None,
            params: vec![1.0; 3],
            total_params: 3.0,
            target: 7.0 / 3.0,
            mu: 0.1,
            lambda: 0.0,
            objective_value: 0.0,
        };
        let rounded = round_bits(&plan, &[2, 3]).unwrap();
        assert_eq!(rounded.bits_int.as_ref().unwrap(), &vec![3, 2, 2]);
    }

    #[test]
    fn infeasible_allowed_set_rejected() {
        let plan = BitPlan {
            bits_cont: vec![1.5, 1.5],
            bits_int: None,
            params: vec![1.0; 2],
            total_params: 2.0,
            target: 1.5,
            mu: 0.1,
            lambda: 0.0,
            objective_value: 0.0,
        };
        assert!(round_bits(&plan, &[2, 3]).is_err());
    }

    #[test]
    fn oracle_certifies_closed_form_on_seeded_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for trial in 0..20 {
            let l = rng.random_range(2..=4usize);
            let scores = LayerImportance {
                scores: (0..l).map(|_| rng.random_range(0.0..2.0f64)).collect(),
            };
            let units: Vec<u64> = (0..l).map(|_| rng.random_range(1..=3u64)).collect();
            let params: Vec<f64> = units.iter().map(|&u| u as f64).collect();
            let plan = allocate_bits(&scores, &params, 2.0, 0.2, None).unwrap();
            let oracle = alloc_oracle(&scores, &units, 2.0, 0.2, 0.01).unwrap();
            assert!(
                plan.objective_value >= oracle.objective_value - 1e-9,
                "trial {trial}: closed form {} < grid {}",
                plan.objective_value,
                oracle.objective_value
            );
        }
    }
}
