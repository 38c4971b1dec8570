//! Budgeted rank allocation.
//!
//! Block sparsities come from the entropy-regularized surrogate
//! `min Σ s_ℓ φ_ℓ + ε φ_ℓ log φ_ℓ  s.t. mean(φ) = φ̄`, whose minimizer is a
//! softmax over `−s/ε`. Retentions `ρ = 1 − φ` are rounded to hardware
//! multiples, and `φ̄` is found by bisection against the parameter budget.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::madac::Family;

pub const DEFAULT_R_MIN: usize = 8;
pub const DEFAULT_MULTIPLE: usize = 8;
/// Default temperature as a fraction of the score standard deviation.
pub const DEFAULT_EPSILON_SCALE: f64 = 0.05;
pub const BISECTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    pub block_id: String,
    pub family: Family,
    pub score: f64,
    pub d_eff: usize,
    /// Parameters per unit of rank.
    pub cost_slope: f64,
    pub cost_offset: f64,
    /// Added to `score` before the softmax.
    pub family_offset: f64,
}

impl BlockProfile {
    pub fn new(block_id: impl Into<String>, family: Family, score: f64, d_eff: usize, cost_slope: f64) -> Self {
        Self {
            block_id: block_id.into(),
            family,
            score,
            d_eff,
            cost_slope,
            cost_offset: 0.0,
            family_offset: 0.0,
        }
    }

    pub fn effective_score(&self) -> f64 {
        self.score + self.family_offset
    }

    pub fn cost(&self, rank: usize) -> f64 {
        self.cost_slope * rank as f64 + self.cost_offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub blocks: Vec<BlockProfile>,
    pub budget: f64,
    pub epsilon: f64,
    pub r_min: usize,
    pub multiple: usize,
}

/// `0.05 · std(s)`, or 1 when the scores are all equal.
pub fn default_epsilon(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 1.0;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let eps = DEFAULT_EPSILON_SCALE * var.sqrt();
    if eps.is_finite() && eps > 0.0 {
        eps
    } else {
        1.0
    }
}

impl AllocationProblem {
    /// A problem with the default temperature, `r_min` and rounding multiple.
    pub fn new(blocks: Vec<BlockProfile>, budget: f64) -> Result<Self> {
        let scores: Vec<f64> = blocks.iter().map(BlockProfile::effective_score).collect();
        let p = Self {
            epsilon: default_epsilon(&scores),
            blocks,
            budget,
            r_min: DEFAULT_R_MIN,
            multiple: DEFAULT_MULTIPLE,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("allocation needs at least one block".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.epsilon)));
        }
        if self.multiple == 0 {
            return Err(Error::Config("rounding multiple must be positive".into()));
        }
        if !self.budget.is_finite() {
            return Err(Error::Config("budget must be finite".into()));
        }
        for b in &self.blocks {
            if !(b.cost_slope > 0.0) || !b.cost_offset.is_finite() || !b.effective_score().is_finite() {
                return Err(Error::Config(format!("block {} has an invalid cost or score", b.block_id)));
            }
            if b.d_eff < self.r_min {
                return Err(Error::Config(format!(
                    "block {} width {} is below r_min {}",
                    b.block_id, b.d_eff, self.r_min
                )));
            }
        }
        Ok(())
    }

    pub fn full_cost(&self) -> f64 {
        self.blocks.iter().map(|b| b.cost(b.d_eff)).sum()
    }

    pub fn min_cost(&self) -> f64 {
        self.blocks.iter().map(|b| b.cost(self.r_min)).sum()
    }

    fn scores(&self) -> Vec<f64> {
        self.blocks.iter().map(BlockProfile::effective_score).collect()
    }

    fn ranks_at(&self, phi_bar: f64) -> Result<(Vec<f64>, Vec<usize>)> {
        let phi = softmax_sparsity(&self.scores(), phi_bar, self.epsilon)?;
        let ranks = map_ranks(&phi, &self.blocks, self.r_min, self.multiple);
        Ok((phi, ranks))
    }

    fn cost_of(&self, ranks: &[usize]) -> f64 {
        self.blocks.iter().zip(ranks).map(|(b, &r)| b.cost(r)).sum()
    }
}

/// `φ_ℓ = L φ̄ · softmax(−s/ε)_ℓ`, clamped at 1 with the excess handed to the
/// remaining blocks in proportion to their weights, repeated until feasible.
pub fn softmax_sparsity(scores: &[f64], phi_bar: f64, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {epsilon}")));
    }
    if !(0.0..=1.0).contains(&phi_bar) {
        return Err(Error::BudgetInfeasible(format!("mean sparsity {phi_bar} outside [0, 1]")));
    }
    let l = scores.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    let s_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = scores.iter().map(|s| (-(s - s_min) / epsilon).exp()).collect();

    let mut phi = vec![0.0; l];
    let mut clamped = vec![false; l];
    loop {
        let n_clamped = clamped.iter().filter(|&&c| c).count();
        let mass = l as f64 * phi_bar - n_clamped as f64;
        if n_clamped == l {
            if mass > 1e-9 {
                return Err(Error::BudgetInfeasible(format!("mean sparsity {phi_bar} cannot be met")));
            }
            break;
        }
        let free_weight: f64 = (0..l).filter(|&i| !clamped[i]).map(|i| weights[i]).sum();
        let mut changed = false;
        for i in 0..l {
            if clamped[i] {
                phi[i] = 1.0;
                continue;
            }
            phi[i] = if free_weight > 0.0 { mass * weights[i] / free_weight } else { 0.0 };
            if phi[i] > 1.0 {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(phi)
}

/// `r = max(r_min, m ⌊(ρ d_eff + m/2) / m⌋)`, capped at `d_eff`.
pub fn map_rank(retention: f64, d_eff: usize, r_min: usize, multiple: usize) -> usize {
    let m = multiple as f64;
    let x = retention.clamp(0.0, 1.0) * d_eff as f64;
    let rounded = multiple * ((x + m / 2.0) / m).floor() as usize;
    rounded.max(r_min).min(d_eff)
}

pub fn map_ranks(phi: &[f64], blocks: &[BlockProfile], r_min: usize, multiple: usize) -> Vec<usize> {
    phi.iter()
        .zip(blocks)
        .map(|(&p, b)| map_rank(1.0 - p, b.d_eff, r_min, multiple))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAllocation {
    pub block_id: String,
    pub family: Family,
    pub score: f64,
    pub d_eff: usize,
    /// Softmax sparsity at the chosen `φ̄`.
    pub sparsity: f64,
    pub retention: f64,
    pub rank: usize,
    /// `rank / d_eff` after rounding and refill.
    pub realized_retention: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub blocks: Vec<BlockAllocation>,
    pub phi_bar: f64,
    pub epsilon: f64,
    pub budget: f64,
    pub total_cost: f64,
    pub full_cost: f64,
    pub min_cost: f64,
}

impl AllocationPlan {
    pub fn rank_of(&self, block_id: &str) -> Option<usize> {
        self.blocks.iter().find(|b| b.block_id == block_id).map(|b| b.rank)
    }

    pub fn ranks(&self) -> BTreeMap<String, usize> {
        self.blocks.iter().map(|b| (b.block_id.clone(), b.rank)).collect()
    }

    /// Plain-text block table followed by totals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<4} {:>12} {:>8} {:>8} {:>6} {:>6} {:>12}",
            "block", "fam", "score", "phi", "rho", "rank", "d_eff", "cost"
        );
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{:<24} {:<4} {:>12.6e} {:>8.4} {:>8.4} {:>6} {:>6} {:>12.0}",
                b.block_id, b.family, b.score, b.sparsity, b.retention, b.rank, b.d_eff, b.cost
            );
        }
        let _ = writeln!(out, "phi_bar {:.6}", self.phi_bar);
        let _ = writeln!(out, "epsilon {:.6e}", self.epsilon);
        let _ = writeln!(out, "total_cost {:.0}", self.total_cost);
        let _ = writeln!(out, "budget {:.0}", self.budget);
        let _ = writeln!(out, "full_cost {:.0}", self.full_cost);
        out
    }
}

fn build_plan(p: &AllocationProblem, phi_bar: f64, phi: &[f64], ranks: &[usize]) -> AllocationPlan {
    let blocks = p
        .blocks
        .iter()
        .zip(phi)
        .zip(ranks)
        .map(|((b, &f), &r)| BlockAllocation {
            block_id: b.block_id.clone(),
            family: b.family,
            score: b.score,
            d_eff: b.d_eff,
            sparsity: f,
            retention: 1.0 - f,
            rank: r,
            realized_retention: r as f64 / b.d_eff as f64,
            cost: b.cost(r),
        })
        .collect();
    AllocationPlan {
        blocks,
        phi_bar,
        epsilon: p.epsilon,
        budget: p.budget,
        total_cost: p.cost_of(ranks),
        full_cost: p.full_cost(),
        min_cost: p.min_cost(),
    }
}

/// Smallest `φ̄` whose rounded plan fits the budget, then a greedy refill by
/// descending score that raises ranks one rounding step at a time while the
/// budget allows.
pub fn bisect_budget(p: &AllocationProblem) -> Result<AllocationPlan> {
    p.validate()?;
    let full = p.full_cost();
    if p.budget >= full {
        let (phi, ranks) = p.ranks_at(0.0)?;
        return Ok(build_plan(p, 0.0, &phi, &ranks));
    }
    let min = p.min_cost();
    if p.budget < min {
        return Err(Error::BudgetInfeasible(format!(
            "budget {} is below the minimum cost {min} at r_min = {}",
            p.budget, p.r_min
        )));
    }

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        let (_, ranks) = p.ranks_at(mid)?;
        if p.cost_of(&ranks) <= p.budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (phi, mut ranks) = p.ranks_at(hi)?;
    let mut cost = p.cost_of(&ranks);

    let mut order: Vec<usize> = (0..p.blocks.len()).collect();
    order.sort_by(|&a, &b| {
        p.blocks[b]
            .effective_score()
            .total_cmp(&p.blocks[a].effective_score())
            .then(a.cmp(&b))
    });
    loop {
        let mut changed = false;
        for &i in &order {
            let b = &p.blocks[i];
            let r = ranks[i];
            if r >= b.d_eff {
                continue;
            }
            let next = (p.multiple * (r / p.multiple + 1)).min(b.d_eff);
            let delta = b.cost_slope * (next - r) as f64;
            if cost + delta <= p.budget {
                ranks[i] = next;
                cost += delta;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(build_plan(p, hi, &phi, &ranks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn surrogate_grad(s: &[f64], phi: &[f64], eps: f64) -> Vec<f64> {
        s.iter().zip(phi).map(|(s, p)| s + eps * (1.0 + p.ln())).collect()
    }

    /// Projected gradient descent on the surrogate over `{mean(φ) = φ̄}`,
    /// started from the uniform point.
    fn projected_gradient(s: &[f64], phi_bar: f64, eps: f64) -> Vec<f64> {
        let l = s.len() as f64;
        let mut phi = vec![phi_bar; s.len()];
        for _ in 0..200_000 {
            let g = surrogate_grad(s, &phi, eps);
            let gm = g.iter().sum::<f64>() / l;
            let p_min = phi.iter().copied().fold(f64::INFINITY, f64::min);
            let step = 0.5 * p_min / eps;
            let mut moved = 0.0_f64;
            for (p, gi) in phi.iter_mut().zip(&g) {
                let d = step * (gi - gm);
                *p -= d;
                moved = moved.max(d.abs());
            }
            if moved < 1e-15 {
                break;
            }
        }
        phi
    }

    #[test]
    fn uniform_scores_give_uniform_sparsity() {
        let phi = softmax_sparsity(&[0.4; 5], 0.3, 0.01).unwrap();
        assert!(phi.iter().all(|p| (p - 0.3).abs() < 1e-15));
        let phi = softmax_sparsity(&[0.1, 0.5, 0.9], 0.3, 1e9).unwrap();
        assert!(phi.iter().all(|p| (p - 0.3).abs() < 1e-6));
    }

    #[test]
    fn four_block_example_matches_optimizer() {
        let s = [0.1, 0.2, 0.3, 0.4];
        let phi = softmax_sparsity(&s, 0.3, 0.1).unwrap();
        let oracle = projected_gradient(&s, 0.3, 0.1);
        for (a, b) in phi.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6, "{phi:?} vs {oracle:?}");
        }
    }

    #[test]
    fn clamping_preserves_mean() {
        let s = [0.0, 0.05, 1.0, 2.0];
        let phi = softmax_sparsity(&s, 0.6, 0.1).unwrap();
        assert!(phi.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(phi[0], 1.0);
        assert!((phi.iter().sum::<f64>() / 4.0 - 0.6).abs() < 1e-12);
        assert!(softmax_sparsity(&s, 1.0, 0.1).unwrap().iter().all(|&p| p == 1.0));
        assert!(matches!(softmax_sparsity(&s, 1.2, 0.1), Err(Error::BudgetInfeasible(_))));
    }

    #[test]
    fn rank_mapping_examples() {
        assert_eq!(map_rank(1.0, 40, 8, 8), 40);
        assert_eq!(map_rank(13.0 / 64.0, 64, 8, 8), 16);
        assert_eq!(map_rank(3.0 / 64.0, 64, 8, 8), 8);
        assert_eq!(map_rank(11.9 / 64.0, 64, 8, 8), 8);
        assert_eq!(map_rank(12.0 / 64.0, 64, 8, 8), 16);
        assert_eq!(map_rank(0.99, 20, 8, 8), 16);
        assert_eq!(map_rank(0.99, 22, 8, 8), 22);
    }

    fn blocks() -> Vec<BlockProfile> {
        vec![
            BlockProfile::new("b0.qk", Family::Qk, 0.3, 64, 640.0),
            BlockProfile::new("b0.vo", Family::Vo, 0.5, 64, 640.0),
            BlockProfile::new("b0.ffn", Family::Ffn, 0.2, 256, 240.0),
            BlockProfile::new("b1.ffn", Family::Ffn, 0.9, 256, 240.0),
        ]
    }

    #[test]
    fn budget_extremes() {
        let mut p = AllocationProblem::new(blocks(), 0.0).unwrap();
        p.budget = p.full_cost();
        let plan = bisect_budget(&p).unwrap();
        assert!(plan.blocks.iter().all(|b| b.rank == b.d_eff && b.sparsity == 0.0));
        p.budget = p.min_cost();
        let plan = bisect_budget(&p).unwrap();
        assert!(plan.blocks.iter().all(|b| b.rank == 8));
        p.budget = p.min_cost() - 1.0;
        assert!(matches!(bisect_budget(&p), Err(Error::BudgetInfeasible(_))));
        p.budget = 2.0 * p.full_cost();
        assert_eq!(bisect_budget(&p).unwrap().total_cost, p.full_cost());
    }

    #[test]
    fn default_epsilon_fallback() {
        assert_eq!(default_epsilon(&[2.0, 2.0]), 1.0);
        assert!((default_epsilon(&[0.0, 2.0]) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn plan_table_lists_blocks() {
        let p = AllocationProblem::new(blocks(), 150_000.0).unwrap();
        let plan = bisect_budget(&p).unwrap();
        let table = plan.to_table();
        assert!(table.contains("b1.ffn") && table.contains("total_cost"));
        assert_eq!(plan.ranks().len(), 4);
    }

    proptest! {
        #[test]
        fn plan_fits_and_is_tight(budget_frac in 0.0f64..1.0, s in proptest::collection::vec(0.0f64..1.0, 4)) {
            let mut bl = blocks();
            for (b, v) in bl.iter_mut().zip(&s) {
                b.score = *v;
            }
            let mut p = AllocationProblem::new(bl, 0.0).unwrap();
            p.budget = p.min_cost() + budget_frac * (p.full_cost() - p.min_cost());
            let plan = bisect_budget(&p).unwrap();
            prop_assert!(plan.total_cost <= p.budget);
            let max_step = p.blocks.iter().map(|b| b.cost_slope * p.multiple as f64).fold(0.0, f64::max);
            prop_assert!(p.budget - plan.total_cost < max_step);
            for (b, pb) in plan.blocks.iter().zip(&p.blocks) {
                prop_assert!(b.rank >= p.r_min && b.rank <= pb.d_eff);
                prop_assert!(b.rank % p.multiple == 0 || b.rank == pb.d_eff);
                if b.rank < pb.d_eff {
                    let next = (p.multiple * (b.rank / p.multiple + 1)).min(pb.d_eff);
                    prop_assert!(plan.total_cost + pb.cost_slope * (next - b.rank) as f64 > p.budget);
                }
            }
        }

        #[test]
        fn higher_scores_are_sparsified_less(s in proptest::collection::vec(-2.0f64..2.0, 2..12),
                                             phi_bar in 0.01f64..0.99, eps in 0.01f64..5.0) {
            let phi = softmax_sparsity(&s, phi_bar, eps).unwrap();
            let mean = phi.iter().sum::<f64>() / s.len() as f64;
            prop_assert!((mean - phi_bar).abs() < 1e-12);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    if s[i] > s[j] {
                        prop_assert!(phi[i] <= phi[j] + 1e-15);
                    }
                }
            }
        }

        #[test]
        fn cost_is_monotone_in_phi_bar(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let p = AllocationProblem::new(blocks(), 1.0).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (_, r_lo) = p.ranks_at(lo).unwrap();
            let (_, r_hi) = p.ranks_at(hi).unwrap();
            prop_assert!(p.cost_of(&r_hi) <= p.cost_of(&r_lo));
        }
    }
}
