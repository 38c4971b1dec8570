//! Timestep-aware activation statistics.
//!
//! Streams of activations are reduced into per-(layer, timestep, input kind)
//! second-moment accumulators, regularized with a trace-relative ridge, scored
//! against the consuming weights with the trace-normalized Rayleigh quotient
//! (TRQ), and finally mixed across timesteps with convex weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Default trace-relative shrinkage.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Which module input an activation tap records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    /// Input of a self-attention block (feeds Q, K and V).
    SaInput,
    /// Latent-side input of a cross-attention block (feeds Q).
    CaQueryInput,
    /// Text-side context of a cross-attention block (feeds K and V). Timestep invariant.
    TextTokens,
    /// Gated FFN intermediate `Z = (X·W_x) ⊙ σ(X·W_g)` (feeds `W_D`).
    FfnIntermediate,
}

impl InputKind {
    pub const ALL: [InputKind; 4] = [
        InputKind::SaInput,
        InputKind::CaQueryInput,
        InputKind::TextTokens,
        InputKind::FfnIntermediate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::SaInput => "sa_input",
            InputKind::CaQueryInput => "ca_query_input",
            InputKind::TextTokens => "text_tokens",
            InputKind::FfnIntermediate => "ffn_intermediate",
        }
    }

    pub fn is_time_invariant(self) -> bool {
        self == InputKind::TextTokens
    }
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InputKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown input kind '{s}'")))
    }
}

/// Identity of one accumulator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StatKey {
    pub layer_id: String,
    pub input_kind: InputKind,
    pub timestep: u32,
}

impl StatKey {
    pub fn new(layer_id: impl Into<String>, input_kind: InputKind, timestep: u32) -> Self {
        Self {
            layer_id: layer_id.into(),
            input_kind,
            timestep,
        }
    }
}

impl fmt::Display for StatKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, t={})", self.layer_id, self.input_kind, self.timestep)
    }
}

/// Running `Σ xᵀx` over all rows seen for one key.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStat {
    key: StatKey,
    dim: usize,
    sum_outer: Matrix,
    samples: u64,
}

impl CorrelationStat {
    pub fn new(key: StatKey, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("accumulator dimension must be positive".into()));
        }
        Ok(Self {
            key,
            dim,
            sum_outer: Matrix::zeros(dim, dim),
            samples: 0,
        })
    }

    pub fn key(&self) -> &StatKey {
        &self.key
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sum_outer(&self) -> &Matrix {
        &self.sum_outer
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Rebuilds an accumulator from stored parts.
    pub fn from_parts(key: StatKey, sum_outer: Matrix, samples: u64) -> Result<Self> {
        if !sum_outer.is_square() || sum_outer.rows() == 0 {
            return Err(Error::Shape("sum of outer products must be square".into()));
        }
        Ok(Self {
            key,
            dim: sum_outer.rows(),
            sum_outer,
            samples,
        })
    }

    /// Adds `batchᵀ·batch` (rows are tokens).
    pub fn accumulate(&mut self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::Shape(format!(
                "batch has {} columns, accumulator {} expects {}",
                batch.cols(),
                self.key,
                self.dim
            )));
        }
        if !batch.is_finite() {
            return Err(Error::InvalidMatrix(format!("non-finite activations for {}", self.key)));
        }
        self.sum_outer.add_assign(&batch.t_matmul(batch));
        self.samples += batch.rows() as u64;
        Ok(())
    }

    /// Combines two shards of the same stream.
    pub fn merge(&self, other: &CorrelationStat) -> Result<CorrelationStat> {
        if self.key != other.key || self.dim != other.dim {
            return Err(Error::MergeKey(format!(
                "{} (dim {}) vs {} (dim {})",
                self.key, self.dim, other.key, other.dim
            )));
        }
        Ok(CorrelationStat {
            key: self.key.clone(),
            dim: self.dim,
            sum_outer: self.sum_outer.add(&other.sum_outer),
            samples: self.samples + other.samples,
        })
    }

    /// `C̃ = Ĉ + λ·(tr Ĉ / d)·I` with `Ĉ = Σxᵀx / N`, symmetrized.
    pub fn finalize(&self, lambda: f64) -> Result<RegularizedCorrelation> {
        if self.samples == 0 {
            return Err(Error::EmptyAccumulator(self.key.to_string()));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
        }
        let moment = self.sum_outer.scale(1.0 / self.samples as f64);
        let ridge = lambda * moment.trace() / self.dim as f64;
        let mut c = moment;
        for i in 0..self.dim {
            c[(i, i)] += ridge;
        }
        Ok(RegularizedCorrelation {
            key: self.key.clone(),
            c_tilde: c.symmetrized(),
            lambda_used: lambda,
            samples: self.samples,
        })
    }
}

/// Regularized second moment for one key.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizedCorrelation {
    pub key: StatKey,
    pub c_tilde: Matrix,
    pub lambda_used: f64,
    pub samples: u64,
}

/// TRQ of one layer's weights at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub layer_id: String,
    pub timestep: u32,
    pub value: f64,
}

/// Trace-normalized Rayleigh quotient `tr(Wᵀ C W) / (‖W‖_F² · tr C)`.
///
/// `w` is `dim × out` (it consumes inputs of width `dim`). The result lies in `[0, 1]`.
pub fn trq_score(w: &Matrix, c_tilde: &Matrix) -> Result<f64> {
    if !c_tilde.is_square() || c_tilde.rows() != w.rows() {
        return Err(Error::Shape(format!(
            "TRQ needs a {0}x{0} correlation for a {0}x{1} weight, got {2}x{3}",
            w.rows(),
            w.cols(),
            c_tilde.rows(),
            c_tilde.cols()
        )));
    }
    let w_norm_sq = w.frobenius_norm_sq();
    let trace = c_tilde.trace();
    if !(w_norm_sq > 0.0) {
        return Err(Error::DegenerateInput("TRQ of a zero weight".into()));
    }
    if !(trace > 0.0) {
        return Err(Error::DegenerateInput("TRQ against a zero-trace correlation".into()));
    }
    let cw = c_tilde.matmul(w);
    let quad: f64 = w.data().iter().zip(cw.data()).map(|(a, b)| a * b).sum();
    // Divide by ‖W‖² first: the isotropic case then yields exactly 1/d.
    Ok(((quad / w_norm_sq) / trace).clamp(0.0, 1.0))
}

/// Normalized eigenvalue entropy of a PSD matrix, in `[0, 1]`.
///
/// 1 means perfectly isotropic, 0 means rank one. Used as the "activation
/// diversity" signal.
pub fn spectral_entropy(c: &Matrix) -> Result<f64> {
    let (values, _) = linalg::symmetric_eigen(c)?;
    let clamped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) || clamped.len() < 2 {
        return Ok(0.0);
    }
    let h: f64 = clamped
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (clamped.len() as f64).ln()).clamp(0.0, 1.0))
}

/// How per-timestep influence scores become mixture weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum Weighting {
    Uniform,
    /// `w_t = I_t / Σ I`.
    TrqProportional,
    /// `w_t ∝ exp(I_t / τ)`.
    TrqSoftmax { temperature: f64 },
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::TrqProportional
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "trq" | "trq_proportional" => Ok(Weighting::TrqProportional),
            _ => {
                let tau = s
                    .strip_prefix("softmax:")
                    .or_else(|| s.strip_prefix("trq_softmax:"))
                    .ok_or_else(|| Error::Config(format!("unknown weighting '{s}'")))?;
                let temperature: f64 = tau
                    .parse()
                    .map_err(|_| Error::Config(format!("bad softmax temperature '{tau}'")))?;
                if !(temperature > 0.0) {
                    return Err(Error::Config("softmax temperature must be positive".into()));
                }
                Ok(Weighting::TrqSoftmax { temperature })
            }
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weighting::Uniform => f.write_str("uniform"),
            Weighting::TrqProportional => f.write_str("trq"),
            Weighting::TrqSoftmax { temperature } => write!(f, "softmax:{temperature}"),
        }
    }
}

/// Convex timestep weights for a single layer's scores.
pub fn mixture_weights(scores: &[InfluenceScore], strategy: Weighting) -> Result<BTreeMap<u32, f64>> {
    let Some(first) = scores.first() else {
        return Err(Error::DegenerateInput("no influence scores".into()));
    };
    if let Some(other) = scores.iter().find(|s| s.layer_id != first.layer_id) {
        return Err(Error::MergeKey(format!(
            "scores mix layers {} and {}",
            first.layer_id, other.layer_id
        )));
    }
    let mut raw: BTreeMap<u32, f64> = BTreeMap::new();
    for s in scores {
        if !(s.value >= 0.0) || !s.value.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "invalid influence score {} at t={}",
                s.value, s.timestep
            )));
        }
        if raw.insert(s.timestep, s.value).is_some() {
            return Err(Error::MergeKey(format!("duplicate timestep {}", s.timestep)));
        }
    }
    let unnormalized: BTreeMap<u32, f64> = match strategy {
        Weighting::Uniform => raw.keys().map(|&t| (t, 1.0)).collect(),
        Weighting::TrqProportional => {
            if raw.values().all(|&v| v == 0.0) {
                return Err(Error::DegenerateInput(format!(
                    "all influence scores of {} are zero",
                    first.layer_id
                )));
            }
            raw
        }
        Weighting::TrqSoftmax { temperature } => {
            let top = raw.values().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            raw.into_iter()
                .map(|(t, v)| (t, ((v - top) / temperature).exp()))
                .collect()
        }
    };
    let total: f64 = unnormalized.values().sum();
    Ok(unnormalized.into_iter().map(|(t, v)| (t, v / total)).collect())
}

/// Fidelity-weighted correlation `C̄ = Σ_t w_t C̃_t` with its cached roots.
#[derive(Debug, Clone)]
pub struct MixedCorrelation {
    pub layer_id: String,
    pub c_bar: Matrix,
    pub r_bar: Matrix,
    pub r_bar_inv: Matrix,
    pub weights: BTreeMap<u32, f64>,
}

impl MixedCorrelation {
    /// Wraps an already-aggregated correlation (weight 1 at timestep 0).
    pub fn from_matrix(layer_id: impl Into<String>, c: Matrix) -> Result<Self> {
        Self::with_weights(layer_id.into(), c, BTreeMap::from([(0, 1.0)]))
    }

    fn with_weights(layer_id: String, c: Matrix, weights: BTreeMap<u32, f64>) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::Shape("correlation must be square".into()));
        }
        let scale = c.max_abs().max(1.0);
        let asym = c.asymmetry();
        if asym > linalg::SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        let c = c.symmetrized();
        let r_bar = linalg::psd_sqrt(&c)?;
        let r_bar_inv = linalg::psd_inv_sqrt(&c, linalg::default_floor(&c))?;
        Ok(Self {
            layer_id,
            c_bar: c,
            r_bar,
            r_bar_inv,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.c_bar.rows()
    }
}

/// Convex combination of per-timestep regularized correlations.
pub fn mix(
    layer_id: &str,
    correlations: &BTreeMap<u32, RegularizedCorrelation>,
    weights: &BTreeMap<u32, f64>,
) -> Result<MixedCorrelation> {
    if correlations.is_empty() {
        return Err(Error::DegenerateInput(format!("no correlations to mix for {layer_id}")));
    }
    if !correlations.keys().eq(weights.keys()) {
        return Err(Error::MergeKey(format!(
            "timesteps {:?} do not match weights {:?}",
            correlations.keys().collect::<Vec<_>>(),
            weights.keys().collect::<Vec<_>>()
        )));
    }
    let total: f64 = weights.values().sum();
    if weights.values().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("mixture weights are not convex (sum {total})")));
    }
    let dim = correlations.values().next().expect("non-empty").c_tilde.rows();
    let mut c_bar = Matrix::zeros(dim, dim);
    for (t, corr) in correlations {
        if corr.c_tilde.rows() != dim {
            return Err(Error::Shape(format!(
                "correlation at t={t} has dim {}, expected {dim}",
                corr.c_tilde.rows()
            )));
        }
        c_bar.add_assign(&corr.c_tilde.scale(weights[t]));
    }
    MixedCorrelation::with_weights(layer_id.to_string(), c_bar, weights.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, substream};
    use proptest::prelude::*;

    fn key() -> StatKey {
        StatKey::new("block0", InputKind::SaInput, 3)
    }

    #[test]
    fn accumulate_single_row() {
        let mut s = CorrelationStat::new(key(), 2).unwrap();
        s.accumulate(&Matrix::from_rows(&[[1.0, 0.0]])).unwrap();
        assert_eq!(s.sum_outer(), &Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
        assert_eq!(s.samples(), 1);
    }

    #[test]
    fn accumulate_dim_mismatch() {
        let mut s = CorrelationStat::new(key(), 3).unwrap();
        assert!(matches!(
            s.accumulate(&Matrix::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn accumulate_is_batch_associative() {
        let mut rng = substream(1, "acc");
        let b = gaussian_matrix(&mut rng, 5, 4);
        let c = gaussian_matrix(&mut rng, 7, 4);
        let mut split = CorrelationStat::new(key(), 4).unwrap();
        split.accumulate(&b).unwrap();
        split.accumulate(&c).unwrap();
        let mut whole = CorrelationStat::new(key(), 4).unwrap();
        whole.accumulate(&Matrix::vstack(&[b, c])).unwrap();
        assert_eq!(split.samples(), whole.samples());
        assert!(split.sum_outer().max_abs_diff(whole.sum_outer()) < 1e-12);
    }

    #[test]
    fn gaussian_moment_converges() {
        // Rows x = g·A with g ~ N(0, I) have second moment AᵀA.
        let mut rng = substream(2, "gauss");
        let a = gaussian_matrix(&mut rng, 8, 8).scale(0.3);
        let truth = a.t_matmul(&a);
        let g = gaussian_matrix(&mut rng, 1000, 8);
        let mut s = CorrelationStat::new(key(), 8).unwrap();
        s.accumulate(&g.matmul(&a)).unwrap();
        let est = s.finalize(0.0).unwrap().c_tilde;
        assert!(est.sub(&truth).frobenius_norm() < 0.15);
    }

    #[test]
    fn merge_identity_and_counts() {
        let mut rng = substream(3, "merge");
        let mut a = CorrelationStat::new(key(), 3).unwrap();
        a.accumulate(&gaussian_matrix(&mut rng, 4, 3)).unwrap();
        let empty = CorrelationStat::new(key(), 3).unwrap();
        assert_eq!(a.merge(&empty).unwrap(), a);
        let mut b = CorrelationStat::new(key(), 3).unwrap();
        b.accumulate(&gaussian_matrix(&mut rng, 6, 3)).unwrap();
        let ab = a.merge(&b).unwrap();
        assert_eq!(ab.samples(), 10);
        assert_eq!(ab, b.merge(&a).unwrap());
    }

    #[test]
    fn merge_key_mismatch() {
        let a = CorrelationStat::new(key(), 3).unwrap();
        let b = CorrelationStat::new(StatKey::new("block0", InputKind::SaInput, 4), 3).unwrap();
        assert!(matches!(a.merge(&b), Err(Error::MergeKey(_))));
        let c = CorrelationStat::new(key(), 2).unwrap();
        assert!(matches!(a.merge(&c), Err(Error::MergeKey(_))));
    }

    #[test]
    fn sharded_stream_matches_unsharded() {
        let mut rng = substream(4, "shard");
        let rows = gaussian_matrix(&mut rng, 40, 5);
        let mut whole = CorrelationStat::new(key(), 5).unwrap();
        whole.accumulate(&rows).unwrap();
        let mut merged = CorrelationStat::new(key(), 5).unwrap();
        for shard in 0..4 {
            let mut s = CorrelationStat::new(key(), 5).unwrap();
            s.accumulate(&rows.row_block(shard * 10, shard * 10 + 10)).unwrap();
            merged = merged.merge(&s).unwrap();
        }
        let rel = merged.sum_outer().sub(whole.sum_outer()).frobenius_norm()
            / whole.sum_outer().frobenius_norm();
        assert!(rel < 1e-9);
        assert_eq!(merged.samples(), 40);
    }

    #[test]
    fn finalize_examples() {
        let mut s = CorrelationStat::new(key(), 2).unwrap();
        s.accumulate(&Matrix::from_rows(&[[1.0, 1.0]])).unwrap();
        assert_eq!(s.finalize(0.0).unwrap().c_tilde, Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]));

        let s = CorrelationStat::from_parts(key(), Matrix::identity(4).scale(3.0), 3).unwrap();
        let c = s.finalize(0.1).unwrap().c_tilde;
        assert!(c.max_abs_diff(&Matrix::identity(4).scale(1.1)) < 1e-15);

        let empty = CorrelationStat::new(key(), 2).unwrap();
        assert!(matches!(empty.finalize(0.1), Err(Error::EmptyAccumulator(_))));
    }

    #[test]
    fn finalize_floors_spectrum() {
        // Rank-2 moment in 6 dimensions.
        let mut rng = substream(5, "nearsing");
        let rows = gaussian_matrix(&mut rng, 30, 2).matmul(&gaussian_matrix(&mut rng, 2, 6));
        let mut s = CorrelationStat::new(key(), 6).unwrap();
        s.accumulate(&rows).unwrap();
        let reg = s.finalize(1e-4).unwrap();
        let moment_trace = s.sum_outer().trace() / 30.0;
        let (values, _) = linalg::symmetric_eigen(&reg.c_tilde).unwrap();
        let min = values.last().copied().unwrap();
        assert!(min >= 1e-4 * moment_trace / 6.0 - 1e-12);
    }

    #[test]
    fn trq_isotropic_is_exactly_inverse_dim() {
        let mut rng = substream(6, "iso");
        for d in [1usize, 3, 7, 10] {
            let w = gaussian_matrix(&mut rng, d, 5);
            assert_eq!(trq_score(&w, &Matrix::identity(d)).unwrap(), 1.0 / d as f64);
        }
    }

    #[test]
    fn trq_aligned_rank_one() {
        let v = [0.6, 0.8, 0.0];
        let c = Matrix::from_fn(3, 3, |i, j| v[i] * v[j]);
        let w = Matrix::from_fn(3, 1, |i, _| 2.0 * v[i]);
        assert!((trq_score(&w, &c).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trq_degenerate() {
        assert!(matches!(
            trq_score(&Matrix::zeros(2, 2), &Matrix::identity(2)),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            trq_score(&Matrix::identity(2), &Matrix::zeros(2, 2)),
            Err(Error::DegenerateInput(_))
        ));
    }

    fn scores(values: &[f64]) -> Vec<InfluenceScore> {
        values
            .iter()
            .enumerate()
            .map(|(t, &value)| InfluenceScore {
                layer_id: "l".into(),
                timestep: t as u32,
                value,
            })
            .collect()
    }

    #[test]
    fn mixture_weight_examples() {
        let w = mixture_weights(&scores(&[0.4; 5]), Weighting::TrqProportional).unwrap();
        assert!(w.values().all(|&v| (v - 0.2).abs() < 1e-15));
        let w = mixture_weights(&scores(&[1.0, 0.0, 0.0]), Weighting::TrqProportional).unwrap();
        assert_eq!(w.values().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        let w = mixture_weights(&scores(&[0.3, 0.1, 0.6]), Weighting::TrqProportional).unwrap();
        for (got, want) in w.values().zip([0.3, 0.1, 0.6]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(matches!(
            mixture_weights(&scores(&[0.0, 0.0]), Weighting::TrqProportional),
            Err(Error::DegenerateInput(_))
        ));
        let w = mixture_weights(&scores(&[0.0, 0.0]), Weighting::Uniform).unwrap();
        assert_eq!(w.values().copied().collect::<Vec<_>>(), vec![0.5, 0.5]);
        let w = mixture_weights(&scores(&[0.1, 0.5]), Weighting::TrqSoftmax { temperature: 0.1 })
            .unwrap();
        assert!(w[&1] > w[&0]);
        assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighting_parse_round_trip() {
        for s in ["uniform", "trq", "softmax:0.25"] {
            let w: Weighting = s.parse().unwrap();
            assert_eq!(w.to_string(), s);
        }
        assert!("softmax:-1".parse::<Weighting>().is_err());
        assert!("bogus".parse::<Weighting>().is_err());
    }

    fn reg(t: u32, c: Matrix) -> RegularizedCorrelation {
        RegularizedCorrelation {
            key: StatKey::new("l", InputKind::SaInput, t),
            c_tilde: c,
            lambda_used: 0.0,
            samples: 1,
        }
    }

    #[test]
    fn mix_examples() {
        let c = Matrix::from_rows(&[[2.0, 0.5], [0.5, 1.0]]);
        let single = BTreeMap::from([(4, reg(4, c.clone()))]);
        let m = mix("l", &single, &BTreeMap::from([(4, 1.0)])).unwrap();
        assert!(m.c_bar.max_abs_diff(&c) < 1e-15);
        assert!(m.r_bar.matmul(&m.r_bar).max_abs_diff(&c) < 1e-12);

        let twice = BTreeMap::from([(0, reg(0, c.clone())), (1, reg(1, c.clone()))]);
        let m = mix("l", &twice, &BTreeMap::from([(0, 0.3), (1, 0.7)])).unwrap();
        assert!(m.c_bar.max_abs_diff(&c) < 1e-15);

        let pair = BTreeMap::from([
            (0, reg(0, Matrix::diag(&[1.0, 0.0]))),
            (1, reg(1, Matrix::diag(&[0.0, 1.0]))),
        ]);
        let m = mix("l", &pair, &BTreeMap::from([(0, 0.5), (1, 0.5)])).unwrap();
        assert!(m.c_bar.max_abs_diff(&Matrix::identity(2).scale(0.5)) < 1e-15);

        assert!(matches!(
            mix("l", &pair, &BTreeMap::from([(0, 1.0)])),
            Err(Error::MergeKey(_))
        ));
    }

    #[test]
    fn spectral_entropy_extremes() {
        assert!((spectral_entropy(&Matrix::identity(4)).unwrap() - 1.0).abs() < 1e-12);
        assert!(spectral_entropy(&Matrix::diag(&[1.0, 0.0, 0.0])).unwrap().abs() < 1e-12);
    }

    fn psd_strategy(d: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, (d + 2) * d).prop_map(move |v| {
            let g = Matrix::new(d + 2, d, v).unwrap();
            g.t_matmul(&g).add(&Matrix::identity(d).scale(1e-3))
        })
    }

    proptest! {
        #[test]
        fn trq_bounded_and_invariant(
            c in psd_strategy(4),
            w in proptest::collection::vec(-3.0f64..3.0, 8),
            alpha in 0.1f64..10.0,
            beta in 0.1f64..10.0,
        ) {
            let w = Matrix::new(4, 2, w).unwrap();
            prop_assume!(w.frobenius_norm_sq() > 1e-6);
            let s = trq_score(&w, &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            let scaled = trq_score(&w.scale(-alpha), &c.scale(beta)).unwrap();
            prop_assert!((s - scaled).abs() < 1e-12);
        }

        #[test]
        fn mixture_stays_within_spectral_envelope(
            a in psd_strategy(3),
            b in psd_strategy(3),
            w in 0.0f64..1.0,
        ) {
            let corr = BTreeMap::from([(0, reg(0, a.clone())), (1, reg(1, b.clone()))]);
            let m = mix("l", &corr, &BTreeMap::from([(0, w), (1, 1.0 - w)])).unwrap();
            let (ea, _) = linalg::symmetric_eigen(&a).unwrap();
            let (eb, _) = linalg::symmetric_eigen(&b).unwrap();
            let (em, _) = linalg::symmetric_eigen(&m.c_bar).unwrap();
            let lo = ea[2].min(eb[2]);
            let hi = ea[0].max(eb[0]);
            prop_assert!(em[2] >= lo - 1e-9 && em[0] <= hi + 1e-9);
        }
    }
}
