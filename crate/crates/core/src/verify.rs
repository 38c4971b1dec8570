//! Seeded self-checks of the closed forms against brute-force references.
//!
//! Each suite draws `instances` random problems from named substreams of a
//! base seed and reports the instance seeds that violate the property.

use crate::alloc::{self, AllocationProblem, BlockProfile};
use crate::calib::{self, MixedCorrelation};
use faer::linalg::solvers::SolveLstsq;

use crate::linalg::Matrix;
use crate::madac::{self, AttentionKind, Family, FfnGroup, Gate, QkGroup, QkHead, VoGroup, VoHead};
use crate::rng::{gaussian_matrix, substream, SeededRng};
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    pub seed: u64,
    pub instances: usize,
    /// Compress attention against a wrong (isotropic) correlation. Used as a
    /// negative control: the equality suites must then fail.
    pub break_whitening: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            break_whitening: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub instance_seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    pub failures: Vec<Failure>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

type Check = fn(u64, &VerifyConfig) -> Result<(), String>;

const SUITES: [(&str, Check); 6] = [
    ("vo_tail_equality", check_vo),
    ("qk_tail_bound", check_qk),
    ("ffn_closed_form", check_ffn),
    ("allocation_softmax", check_softmax),
    ("allocation_budget", check_budget),
    ("trq_invariance", check_trq),
];

pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|(n, _)| *n).collect()
}

pub fn run(config: &VerifyConfig) -> Vec<SuiteResult> {
    SUITES
        .iter()
        .map(|(name, check)| {
            let failures = (0..config.instances as u64)
                .map(|i| config.seed.wrapping_mul(1_000_003).wrapping_add(i))
                .filter_map(|s| check(s, config).err().map(|detail| Failure { instance_seed: s, detail }))
                .collect();
            SuiteResult {
                name,
                instances: config.instances,
                failures,
            }
        })
        .collect()
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn whitening(c: &Matrix, config: &VerifyConfig) -> Result<MixedCorrelation, String> {
    let c = if config.break_whitening {
        Matrix::identity(c.rows()).scale(c.trace() / c.rows() as f64)
    } else {
        c.clone()
    };
    MixedCorrelation::from_matrix("verify", c).map_err(|e| e.to_string())
}

fn dims(rng: &mut SeededRng) -> (usize, usize, usize) {
    let heads = rng.random_range(1..=4);
    let width = rng.random_range(1..=4);
    let d = rng.random_range((heads * width).max(2)..=16);
    (d, heads, width)
}

fn check_vo(seed: u64, config: &VerifyConfig) -> Result<(), String> {
    let mut rng = substream(seed, "verify/vo");
    let (d, heads, width) = dims(&mut rng);
    let n = d + rng.random_range(0..8);
    let x = gaussian_matrix(&mut rng, n, d);
    let g = VoGroup::new(
        AttentionKind::SelfAttention,
        (0..heads)
            .map(|_| VoHead {
                v: gaussian_matrix(&mut rng, d, width),
                o: gaussian_matrix(&mut rng, width, d),
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    let r = rng.random_range(1..=width);
    let c = whitening(&x.t_matmul(&x), config)?;
    let out = madac::compress_vo(&g, &c, r).map_err(|e| e.to_string())?;
    let measured = madac::vo_loss(&g, &out.group, &[x]).map_err(|e| e.to_string())?;
    if rel_gap(measured, out.predicted_error) > 1e-6 && out.predicted_error.max(measured) > 1e-12 {
        return Err(format!("loss {measured:e} vs tail {:e}", out.predicted_error));
    }
    Ok(())
}

fn check_qk(seed: u64, config: &VerifyConfig) -> Result<(), String> {
    let mut rng = substream(seed, "verify/qk");
    let (d, heads, width) = dims(&mut rng);
    let g = QkGroup::new(
        AttentionKind::SelfAttention,
        (0..heads)
            .map(|_| QkHead {
                q: gaussian_matrix(&mut rng, d, width),
                k: gaussian_matrix(&mut rng, d, width),
            })
            .collect(),
    )
    .map_err(|e| e.to_string())?;
    // A single sequence gives equality; several give a strict bound.
    let sequences = if heads == 1 { 1 } else { rng.random_range(1..=3) };
    let xs: Vec<Matrix> = (0..sequences)
        .map(|_| {
            let n = d + rng.random_range(0..4);
            gaussian_matrix(&mut rng, n, d)
        })
        .collect();
    let mut gram = Matrix::zeros(d, d);
    for x in &xs {
        gram.add_assign(&x.t_matmul(x));
    }
    let c = whitening(&gram, config)?;
    let r = rng.random_range(1..=width);
    let out = madac::compress_qk(&g, &c, &c, r).map_err(|e| e.to_string())?;
    let measured = madac::qk_loss(&g, &out.group, &xs, None).map_err(|e| e.to_string())?;
    let tail = out.predicted_error;
    if measured > tail * (1.0 + 1e-6) + 1e-12 {
        return Err(format!("loss {measured:e} exceeds tail {tail:e}"));
    }
    if sequences == 1 && rel_gap(measured, tail) > 1e-6 && tail.max(measured) > 1e-12 {
        return Err(format!("single-sequence loss {measured:e} differs from tail {tail:e}"));
    }
    Ok(())
}

fn check_ffn(seed: u64, _config: &VerifyConfig) -> Result<(), String> {
    let mut rng = substream(seed, "verify/ffn");
    let d = rng.random_range(2..=8);
    let d_int = rng.random_range(2..=12);
    let n = d_int + rng.random_range(4..16);
    let k = rng.random_range(1..=d_int);
    let g = FfnGroup::new(
        gaussian_matrix(&mut rng, d, d_int),
        gaussian_matrix(&mut rng, d, d_int),
        gaussian_matrix(&mut rng, d_int, d),
        Gate::Gelu,
    )
    .map_err(|e| e.to_string())?;
    let x = gaussian_matrix(&mut rng, n, d);
    let z = g.intermediate(&x);
    let k_stats = z.t_matmul(&z);
    let out = madac::compress_ffn(&g, &k_stats, k).map_err(|e| e.to_string())?;
    let sel = out.selection.expect("FFN selection");

    // Least squares min ‖Z W_D − Z_M B‖ via Householder QR of Z_M.
    let qr = sel.apply(&z).to_faer().qr();
    let oracle = Matrix::from_faer(qr.solve_lstsq(z.matmul(&g.w_d).to_faer()).as_ref());
    let diff = oracle.max_abs_diff(&out.group.w_d);
    if diff > 1e-8 * oracle.max_abs().max(1.0) {
        return Err(format!("closed form differs from least squares by {diff:e}"));
    }

    let residual = z.matmul(&g.w_d).sub(&sel.apply(&z).matmul(&out.group.w_d));
    let v_i = residual.frobenius_norm_sq();
    let bound = madac::ffn_error_bound(&g.w_d, &k_stats, &sel).map_err(|e| e.to_string())?;
    if v_i > bound * (1.0 + 1e-9) + 1e-9 {
        return Err(format!("loss {v_i:e} exceeds bound {bound:e}"));
    }
    Ok(())
}

/// Projected gradient descent on `Σ s φ + ε φ log φ` over `{mean φ = φ̄}`.
pub fn surrogate_minimizer(s: &[f64], phi_bar: f64, epsilon: f64) -> Vec<f64> {
    let l = s.len() as f64;
    let mut phi = vec![phi_bar; s.len()];
    for _ in 0..500_000 {
        let g: Vec<f64> = s.iter().zip(&phi).map(|(s, p)| s + epsilon * (1.0 + p.ln())).collect();
        let mean = g.iter().sum::<f64>() / l;
        let step = 0.5 * phi.iter().copied().fold(f64::INFINITY, f64::min) / epsilon;
        let mut moved = 0.0_f64;
        for (p, gi) in phi.iter_mut().zip(&g) {
            let delta = step * (gi - mean);
            *p -= delta;
            moved = moved.max(delta.abs());
        }
        if moved < 1e-16 {
            break;
        }
    }
    phi
}

fn check_softmax(seed: u64, _config: &VerifyConfig) -> Result<(), String> {
    let mut rng = substream(seed, "verify/softmax");
    let l = rng.random_range(2..=8);
    let s: Vec<f64> = (0..l).map(|_| rng.random::<f64>()).collect();
    let epsilon = 0.2 + rng.random::<f64>();
    // With weights w = softmax(−s/ε), φ = L φ̄ w stays below 1 while φ̄ < 1 / (L max w).
    let w = alloc::softmax_sparsity(&s, 1.0 / l as f64, epsilon).map_err(|e| e.to_string())?;
    let peak = w.iter().copied().fold(0.0, f64::max);
    let phi_bar = (0.05 + 0.9 * rng.random::<f64>()) * (1.0 / (l as f64 * peak)).min(1.0);
    let phi = alloc::softmax_sparsity(&s, phi_bar, epsilon).map_err(|e| e.to_string())?;
    if phi.iter().any(|&p| p >= 1.0) {
        return Ok(());
    }
    let oracle = surrogate_minimizer(&s, phi_bar, epsilon);
    for (a, b) in phi.iter().zip(&oracle) {
        if (a - b).abs() > 1e-6 {
            return Err(format!("closed form {a} vs optimizer {b}"));
        }
    }
    Ok(())
}

fn check_budget(seed: u64, _config: &VerifyConfig) -> Result<(), String> {
    let mut rng = substream(seed, "verify/budget");
    let (d, heads, d_int) = (320, 8, 1280);
    let blocks: Vec<BlockProfile> = (0..12)
        .map(|i| {
            let family = Family::ALL[i % 3];
            let (d_eff, slope) = match family {
                Family::Ffn => (d_int, 3.0 * d as f64),
                _ => (d / heads, heads as f64 * 2.0 * d as f64),
            };
            BlockProfile::new(format!("g{i}"), family, rng.random::<f64>(), d_eff, slope)
        })
        .collect();
    let mut p = AllocationProblem::new(blocks, 0.0).map_err(|e| e.to_string())?;
    p.budget = p.min_cost() + rng.random::<f64>() * (p.full_cost() - p.min_cost());
    let plan = alloc::bisect_budget(&p).map_err(|e| e.to_string())?;
    let step = p.blocks.iter().map(|b| b.cost_slope * p.multiple as f64).fold(0.0, f64::max);
    if plan.total_cost > p.budget || p.budget - plan.total_cost >= step {
        return Err(format!("cost {} vs budget {}", plan.total_cost, p.budget));
    }
    for a in &plan.blocks {
        for b in &plan.blocks {
            if a.d_eff == b.d_eff && a.score > b.score && a.rank < b.rank {
                return Err(format!("{} outranked by lower-scored {}", a.block_id, b.block_id));
            }
        }
    }
    Ok(())
}

fn check_trq(seed: u64, _config: &VerifyConfig) -> Result<(), String> {
    let mut rng = substream(seed, "verify/trq");
    let d = rng.random_range(2..=12);
    let out = rng.random_range(1..=6);
    let w = gaussian_matrix(&mut rng, d, out);
    let a = gaussian_matrix(&mut rng, d + 3, d);
    let c = a.t_matmul(&a);
    let alpha = 0.1 + 10.0 * rng.random::<f64>();
    let beta = 0.1 + 10.0 * rng.random::<f64>();
    let base = calib::trq_score(&w, &c).map_err(|e| e.to_string())?;
    let scaled = calib::trq_score(&w.scale(alpha), &c.scale(beta)).map_err(|e| e.to_string())?;
    if !(0.0..=1.0).contains(&base) || (base - scaled).abs() > 1e-12 {
        return Err(format!("TRQ {base} vs scaled {scaled}"));
    }
    let iso = calib::trq_score(&w, &Matrix::identity(d)).map_err(|e| e.to_string())?;
    if iso != 1.0 / d as f64 {
        return Err(format!("isotropic TRQ {iso} is not 1/{d}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_run_passes() {
        let results = run(&VerifyConfig {
            seed: 3,
            instances: 20,
            break_whitening: false,
        });
        for r in &results {
            assert!(r.passed(), "{}: {:?}", r.name, r.failures.first());
        }
    }

    #[test]
    fn broken_whitening_is_caught() {
        let results = run(&VerifyConfig {
            seed: 3,
            instances: 20,
            break_whitening: true,
        });
        assert!(!results.iter().find(|r| r.name == "vo_tail_equality").unwrap().passed());
    }
}
