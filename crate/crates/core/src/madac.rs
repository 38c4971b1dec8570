//! Module-aligned, data-aware compression of the three weight-group types.
//!
//! - Type-I, gated FFN: a shared column selection `M_k` on the intermediate
//!   width, chosen by pivoted QR on the correlation-normalized intermediate
//!   correlation `K`, with the down-projection solved in closed form
//!   `Ŵ_D = (MᵀKM)⁺ MᵀK W_D`.
//! - Type-II, query–key: per head, SVD of the whitened product
//!   `(R_q W_q)(R_k W_k)ᵀ`, truncated and unwhitened.
//! - Type-III, value–output: per head, SVD of `R_v W_v W_o`, truncated and
//!   unwhitened on the value side only.
//!
//! `R = C̄^{1/2}` comes from the timestep-mixed correlations in [`crate::calib`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::MixedCorrelation;
use crate::error::{Error, Result};
use crate::linalg::{self, ColumnSelection, Matrix};

/// Elementwise gate nonlinearity of the FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// tanh approximation of GELU.
    Gelu,
    Silu,
    Identity,
}

impl Gate {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Gate::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Gate::Silu => x / (1.0 + (-x).exp()),
            Gate::Identity => x,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gate::Gelu => "gelu",
            Gate::Silu => "silu",
            Gate::Identity => "identity",
        }
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Gate::Gelu),
            "silu" => Ok(Gate::Silu),
            "identity" => Ok(Gate::Identity),
            _ => Err(Error::Config(format!("unknown gate '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::SelfAttention => "self",
            AttentionKind::Cross => "cross",
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AttentionKind::SelfAttention),
            "cross" => Ok(AttentionKind::Cross),
            _ => Err(Error::Config(format!("unknown attention kind '{s}'"))),
        }
    }
}

/// Width bookkeeping for one transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleShape {
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_inner: usize,
}

impl ModuleShape {
    pub fn new(d_model: usize, heads: usize, ffn_inner: usize) -> Result<Self> {
        if d_model == 0 || heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model width {d_model}"
            )));
        }
        if ffn_inner < d_model {
            return Err(Error::Config(format!(
                "FFN inner width {ffn_inner} is smaller than model width {d_model}"
            )));
        }
        Ok(Self {
            d_model,
            heads,
            head_dim: d_model / heads,
            ffn_inner,
        })
    }
}

/// Per-head query/key projections. `q` is `d_q × w`, `k` is `d_k × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkHead {
    pub q: Matrix,
    pub k: Matrix,
}

/// Per-head value/output projections. `v` is `d_kv × w`, `o` is `w × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoHead {
    pub v: Matrix,
    pub o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QkGroup {
    pub kind: AttentionKind,
    pub heads: Vec<QkHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoGroup {
    pub kind: AttentionKind,
    pub heads: Vec<VoHead>,
}

/// Gated feed-forward: `Y = ((X W_x) ⊙ σ(X W_g)) W_D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnGroup {
    pub w_x: Matrix,
    pub w_g: Matrix,
    pub w_d: Matrix,
    pub gate: Gate,
}

fn check_heads(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::Shape("group has no heads".into()))
    } else {
        Ok(())
    }
}

impl QkGroup {
    pub fn new(kind: AttentionKind, heads: Vec<QkHead>) -> Result<Self> {
        check_heads(heads.len())?;
        let (dq, dk) = (heads[0].q.rows(), heads[0].k.rows());
        for (j, h) in heads.iter().enumerate() {
            if h.q.rows() != dq || h.k.rows() != dk || h.q.cols() != h.k.cols() || h.q.cols() == 0 {
                return Err(Error::Shape(format!("inconsistent QK head {j}")));
            }
        }
        Ok(Self { kind, heads })
    }

    pub fn query_dim(&self) -> usize {
        self.heads[0].q.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.heads[0].k.rows()
    }

    pub fn head_width(&self) -> usize {
        self.heads[0].q.cols()
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.q.rows() * h.q.cols() + h.k.rows() * h.k.cols()).sum()
    }

    /// Concatenated `[W_q,1 … W_q,H]`.
    pub fn full_query(&self) -> Matrix {
        Matrix::hstack(&self.heads.iter().map(|h| h.q.clone()).collect::<Vec<_>>())
    }

    pub fn full_key(&self) -> Matrix {
        Matrix::hstack(&self.heads.iter().map(|h| h.k.clone()).collect::<Vec<_>>())
    }
}

impl VoGroup {
    pub fn new(kind: AttentionKind, heads: Vec<VoHead>) -> Result<Self> {
        check_heads(heads.len())?;
        let (dv, dout) = (heads[0].v.rows(), heads[0].o.cols());
        for (j, h) in heads.iter().enumerate() {
            if h.v.rows() != dv || h.o.cols() != dout || h.v.cols() != h.o.rows() || h.v.cols() == 0 {
                return Err(Error::Shape(format!("inconsistent VO head {j}")));
            }
        }
        Ok(Self { kind, heads })
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].v.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.heads[0].o.cols()
    }

    pub fn head_width(&self) -> usize {
        self.heads[0].v.cols()
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.v.rows() * h.v.cols() + h.o.rows() * h.o.cols()).sum()
    }

    /// Concatenated `[W_v,1 … W_v,H]`.
    pub fn full_value(&self) -> Matrix {
        Matrix::hstack(&self.heads.iter().map(|h| h.v.clone()).collect::<Vec<_>>())
    }

    /// Stacked `[W_o,1; …; W_o,H]`.
    pub fn full_output(&self) -> Matrix {
        Matrix::vstack(&self.heads.iter().map(|h| h.o.clone()).collect::<Vec<_>>())
    }
}

impl FfnGroup {
    pub fn new(w_x: Matrix, w_g: Matrix, w_d: Matrix, gate: Gate) -> Result<Self> {
        if w_x.shape() != w_g.shape() || w_d.rows() != w_x.cols() || w_x.cols() == 0 {
            return Err(Error::Shape(format!(
                "FFN shapes x {:?}, g {:?}, d {:?} do not compose",
                w_x.shape(),
                w_g.shape(),
                w_d.shape()
            )));
        }
        Ok(Self { w_x, w_g, w_d, gate })
    }

    pub fn inner_dim(&self) -> usize {
        self.w_x.cols()
    }

    pub fn param_count(&self) -> usize {
        2 * self.w_x.rows() * self.w_x.cols() + self.w_d.rows() * self.w_d.cols()
    }

    /// `Z = (X W_x) ⊙ σ(X W_g)`.
    pub fn intermediate(&self, x: &Matrix) -> Matrix {
        let gate = self.gate;
        x.matmul(&self.w_x)
            .zip_with(&x.matmul(&self.w_g), |a, b| a * gate.apply(b))
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.intermediate(x).matmul(&self.w_d)
    }
}

/// A compressed group plus what the closed form predicts about its error.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed<G> {
    pub group: G,
    /// Per-head rank (attention) or number of kept intermediate channels (FFN).
    pub achieved_rank: usize,
    /// Σ spectral tails (attention) or the Nyström residual `‖K − K̂‖_F` (FFN).
    pub predicted_error: f64,
    /// Kept intermediate channels, FFN only.
    pub selection: Option<ColumnSelection>,
}

/// Diagonal entries below `ZERO_VARIANCE · trace / d_int` mark dead channels.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// Channels to pivot on, ordered by pivoted QR on `D^{-1/2} K D^{-1/2}`.
/// Dead channels are appended in index order if `k` exceeds the live count.
pub fn select_ffn_channels(k_stats: &Matrix, k: usize) -> Result<ColumnSelection> {
    let d_int = k_stats.rows();
    if !k_stats.is_square() {
        return Err(Error::Shape("K must be square".into()));
    }
    if k == 0 || k > d_int {
        return Err(Error::RankOutOfRange { rank: k, max: d_int });
    }
    let scale = k_stats.max_abs().max(1.0);
    let asym = k_stats.asymmetry();
    if asym > linalg::SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let trace = k_stats.trace();
    let floor = ZERO_VARIANCE * trace.max(0.0) / d_int as f64;
    let diag = k_stats.diagonal();
    let (live, dead): (Vec<usize>, Vec<usize>) = (0..d_int).partition(|&i| diag[i] > floor);

    let mut chosen = Vec::with_capacity(k);
    if !live.is_empty() {
        let inv_sqrt: Vec<f64> = live.iter().map(|&i| 1.0 / diag[i].sqrt()).collect();
        let normalized = Matrix::from_fn(live.len(), live.len(), |a, b| {
            k_stats[(live[a], live[b])] * inv_sqrt[a] * inv_sqrt[b]
        });
        let steps = k.min(live.len());
        let qr = linalg::cpqr(&normalized, steps)?;
        chosen.extend(qr.selection.indices().iter().map(|&j| live[j]));
    }
    chosen.extend(dead.into_iter().take(k - chosen.len()));
    ColumnSelection::new(d_int, chosen)
}

/// `Ŵ_D = (MᵀKM)⁺ MᵀK W_D` for a given selection.
pub fn solve_down_projection(
    k_stats: &Matrix,
    selection: &ColumnSelection,
    w_d: &Matrix,
) -> Result<Matrix> {
    let km = selection.apply(k_stats); // K M
    let core = selection.apply_rows(&km); // Mᵀ K M
    let rhs = km.t_matmul(w_d); // Mᵀ K W_D (K symmetric)
    Ok(linalg::pinv(&core, linalg::PINV_RCOND)?.matmul(&rhs))
}

/// Type-I compression of a gated FFN to `k` intermediate channels.
pub fn compress_ffn(g: &FfnGroup, k_stats: &Matrix, k: usize) -> Result<Compressed<FfnGroup>> {
    let d_int = g.inner_dim();
    if k_stats.shape() != (d_int, d_int) {
        return Err(Error::Shape(format!(
            "K is {}x{}, FFN inner width is {d_int}",
            k_stats.rows(),
            k_stats.cols()
        )));
    }
    let selection = select_ffn_channels(k_stats, k)?;
    let w_d = solve_down_projection(k_stats, &selection, &g.w_d)?;
    let residual = linalg::nystrom_residual(k_stats, &selection)?;
    Ok(Compressed {
        group: FfnGroup {
            w_x: selection.apply(&g.w_x),
            w_g: selection.apply(&g.w_g),
            w_d,
            gate: g.gate,
        },
        achieved_rank: k,
        predicted_error: residual.frobenius_norm(),
        selection: Some(selection),
    })
}

/// Upper bound `‖W_D‖₂² · ‖K⁻¹‖₂ · E_Nys(K)²` on the Type-I loss.
/// Infinite when `K` is singular.
pub fn ffn_error_bound(w_d: &Matrix, k_stats: &Matrix, selection: &ColumnSelection) -> Result<f64> {
    let (values, _) = linalg::symmetric_eigen(k_stats)?;
    let lambda_min = values.last().copied().unwrap_or(0.0);
    if !(lambda_min > 0.0) {
        return Ok(f64::INFINITY);
    }
    let wd_norm = linalg::spectral_norm(w_d)?;
    let nys = linalg::nystrom_residual(k_stats, selection)?.frobenius_norm_sq();
    Ok(wd_norm * wd_norm / lambda_min * nys)
}

fn check_whitening(c: &MixedCorrelation, dim: usize, side: &str) -> Result<()> {
    if c.dim() != dim {
        return Err(Error::Shape(format!(
            "{side} correlation has dim {}, weights expect {dim}",
            c.dim()
        )));
    }
    let roundtrip = c.r_bar_inv.matmul(&c.r_bar);
    let err = roundtrip.max_abs_diff(&Matrix::identity(dim));
    if !(err <= 1e-6) {
        return Err(Error::WhiteningSingular(format!(
            "{side} whitening of {} loses {err:e} on R⁻¹R; raise the regularization",
            c.layer_id
        )));
    }
    Ok(())
}

fn check_rank(r: usize, width: usize) -> Result<()> {
    if r == 0 || r > width {
        Err(Error::RankOutOfRange { rank: r, max: width })
    } else {
        Ok(())
    }
}

/// Type-II compression: per-head whitening SVD of the query–key product.
pub fn compress_qk(
    g: &QkGroup,
    c_q: &MixedCorrelation,
    c_k: &MixedCorrelation,
    r: usize,
) -> Result<Compressed<QkGroup>> {
    check_rank(r, g.head_width().min(g.query_dim()).min(g.key_dim()))?;
    check_whitening(c_q, g.query_dim(), "query")?;
    check_whitening(c_k, g.key_dim(), "key")?;
    let mut heads = Vec::with_capacity(g.heads.len());
    let mut tail = 0.0;
    for h in &g.heads {
        let wq = c_q.r_bar.matmul(&h.q);
        let wk = c_k.r_bar.matmul(&h.k);
        let (svd, t) = linalg::svd_truncate(&wq.matmul_t(&wk), r)?;
        tail += t;
        let v_sigma = Matrix::from_fn(svd.v.rows(), r, |i, j| svd.v[(i, j)] * svd.singular_values[j]);
        heads.push(QkHead {
            q: c_q.r_bar_inv.matmul(&svd.u),
            k: c_k.r_bar_inv.matmul(&v_sigma),
        });
    }
    Ok(Compressed {
        group: QkGroup { kind: g.kind, heads },
        achieved_rank: r,
        predicted_error: tail,
        selection: None,
    })
}

/// Type-III compression: per-head whitening SVD of the value–output product.
pub fn compress_vo(g: &VoGroup, c_v: &MixedCorrelation, r: usize) -> Result<Compressed<VoGroup>> {
    check_rank(r, g.head_width().min(g.input_dim()).min(g.output_dim()))?;
    check_whitening(c_v, g.input_dim(), "value")?;
    let mut heads = Vec::with_capacity(g.heads.len());
    let mut tail = 0.0;
    for h in &g.heads {
        let composite = c_v.r_bar.matmul(&h.v).matmul(&h.o);
        let (svd, t) = linalg::svd_truncate(&composite, r)?;
        tail += t;
        let sigma_vt = Matrix::from_fn(r, svd.v.rows(), |i, j| svd.singular_values[i] * svd.v[(j, i)]);
        heads.push(VoHead {
            v: c_v.r_bar_inv.matmul(&svd.u),
            o: sigma_vt,
        });
    }
    Ok(Compressed {
        group: VoGroup { kind: g.kind, heads },
        achieved_rank: r,
        predicted_error: tail,
        selection: None,
    })
}

/// Any of the three group types.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightGroup {
    Qk(QkGroup),
    Vo(VoGroup),
    Ffn(FfnGroup),
}

/// Group family, used for allocation and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Qk,
    Vo,
    Ffn,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Qk, Family::Vo, Family::Ffn];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Qk => "qk",
            Family::Vo => "vo",
            Family::Ffn => "ffn",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown family '{s}'")))
    }
}

impl WeightGroup {
    pub fn family(&self) -> Family {
        match self {
            WeightGroup::Qk(_) => Family::Qk,
            WeightGroup::Vo(_) => Family::Vo,
            WeightGroup::Ffn(_) => Family::Ffn,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            WeightGroup::Qk(g) => g.param_count(),
            WeightGroup::Vo(g) => g.param_count(),
            WeightGroup::Ffn(g) => g.param_count(),
        }
    }
}

/// Module inputs for evaluating the reconstruction objective. Each entry is one
/// sequence (`tokens × dim`). `context` holds the key/value side of
/// cross-attention and is `None` for self-attention and FFN.
#[derive(Debug, Clone, Default)]
pub struct LossBatch {
    pub inputs: Vec<Matrix>,
    pub context: Option<Vec<Matrix>>,
}

/// `Σ_i Σ_heads ‖(X_i W_q)(Y_i W_k)ᵀ − (X_i Ŵ_q)(Y_i Ŵ_k)ᵀ‖_F²`, with `Y = X` when
/// `keys` is `None`.
pub fn qk_loss(
    original: &QkGroup,
    compressed: &QkGroup,
    queries: &[Matrix],
    keys: Option<&[Matrix]>,
) -> Result<f64> {
    if original.heads.len() != compressed.heads.len() {
        return Err(Error::Shape("head counts differ".into()));
    }
    let keys = keys.unwrap_or(queries);
    if keys.len() != queries.len() {
        return Err(Error::Shape("query and key batches differ in length".into()));
    }
    let mut total = 0.0;
    for (x, y) in queries.iter().zip(keys) {
        if x.cols() != original.query_dim() || y.cols() != original.key_dim() {
            return Err(Error::Shape("QK inputs do not match weight widths".into()));
        }
        for (h, hc) in original.heads.iter().zip(&compressed.heads) {
            let a = x.matmul(&h.q).matmul_t(&y.matmul(&h.k));
            let b = x.matmul(&hc.q).matmul_t(&y.matmul(&hc.k));
            total += a.sub(&b).frobenius_norm_sq();
        }
    }
    Ok(total)
}

/// `Σ_i Σ_heads ‖X_i W_v W_o − X_i Ŵ_v Ŵ_o‖_F²` (per-head value–output maps).
pub fn vo_loss(original: &VoGroup, compressed: &VoGroup, inputs: &[Matrix]) -> Result<f64> {
    if original.heads.len() != compressed.heads.len() {
        return Err(Error::Shape("head counts differ".into()));
    }
    let mut total = 0.0;
    for x in inputs {
        if x.cols() != original.input_dim() {
            return Err(Error::Shape("VO inputs do not match weight width".into()));
        }
        for (h, hc) in original.heads.iter().zip(&compressed.heads) {
            let a = x.matmul(&h.v).matmul(&h.o);
            let b = x.matmul(&hc.v).matmul(&hc.o);
            total += a.sub(&b).frobenius_norm_sq();
        }
    }
    Ok(total)
}

/// `Σ_i ‖FFN(X_i) − FFN̂(X_i)‖_F²`.
pub fn ffn_loss(original: &FfnGroup, compressed: &FfnGroup, inputs: &[Matrix]) -> Result<f64> {
    let mut total = 0.0;
    for x in inputs {
        if x.cols() != original.w_x.rows() || x.cols() != compressed.w_x.rows() {
            return Err(Error::Shape("FFN inputs do not match weight width".into()));
        }
        total += original.forward(x).sub(&compressed.forward(x)).frobenius_norm_sq();
    }
    Ok(total)
}

/// The reconstruction objective for any group type.
pub fn reconstruction_loss(
    original: &WeightGroup,
    compressed: &WeightGroup,
    batch: &LossBatch,
) -> Result<f64> {
    match (original, compressed) {
        (WeightGroup::Qk(a), WeightGroup::Qk(b)) => {
            qk_loss(a, b, &batch.inputs, batch.context.as_deref())
        }
        (WeightGroup::Vo(a), WeightGroup::Vo(b)) => {
            vo_loss(a, b, batch.context.as_deref().unwrap_or(&batch.inputs))
        }
        (WeightGroup::Ffn(a), WeightGroup::Ffn(b)) => ffn_loss(a, b, &batch.inputs),
        _ => Err(Error::Shape("original and compressed groups differ in type".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, substream, SeededRng};

    fn rand_qk(rng: &mut SeededRng, d: usize, heads: usize, w: usize) -> QkGroup {
        QkGroup::new(
            AttentionKind::SelfAttention,
            (0..heads)
                .map(|_| QkHead {
                    q: gaussian_matrix(rng, d, w),
                    k: gaussian_matrix(rng, d, w),
                })
                .collect(),
        )
        .unwrap()
    }

    fn rand_vo(rng: &mut SeededRng, d: usize, heads: usize, w: usize) -> VoGroup {
        VoGroup::new(
            AttentionKind::SelfAttention,
            (0..heads)
                .map(|_| VoHead {
                    v: gaussian_matrix(rng, d, w),
                    o: gaussian_matrix(rng, w, d),
                })
                .collect(),
        )
        .unwrap()
    }

    fn rand_ffn(rng: &mut SeededRng, d: usize, d_int: usize, gate: Gate) -> FfnGroup {
        FfnGroup::new(
            gaussian_matrix(rng, d, d_int),
            gaussian_matrix(rng, d, d_int),
            gaussian_matrix(rng, d_int, d),
            gate,
        )
        .unwrap()
    }

    fn identity_corr(d: usize) -> MixedCorrelation {
        MixedCorrelation::from_matrix("id", Matrix::identity(d)).unwrap()
    }

    #[test]
    fn shape_rules() {
        assert!(ModuleShape::new(8, 3, 32).is_err());
        assert!(ModuleShape::new(8, 2, 4).is_err());
        let s = ModuleShape::new(8, 2, 32).unwrap();
        assert_eq!(s.head_dim, 4);
    }

    #[test]
    fn qk_identity_full_rank_recovers_product() {
        let mut rng = substream(1, "qk");
        let g = rand_qk(&mut rng, 8, 2, 4);
        let c = identity_corr(8);
        let out = compress_qk(&g, &c, &c, 4).unwrap();
        for (h, hc) in g.heads.iter().zip(&out.group.heads) {
            assert!(h.q.matmul_t(&h.k).max_abs_diff(&hc.q.matmul_t(&hc.k)) < 1e-9);
        }
        assert!(out.predicted_error < 1e-18);
    }

    #[test]
    fn qk_rank_one_product_is_preserved() {
        let mut rng = substream(2, "qk1");
        let g = rand_qk(&mut rng, 6, 1, 1);
        let c = MixedCorrelation::from_matrix("c", {
            let a = gaussian_matrix(&mut rng, 9, 6);
            a.t_matmul(&a)
        })
        .unwrap();
        let out = compress_qk(&g, &c, &c, 1).unwrap();
        assert!(out.predicted_error < 1e-18);
        let h = &g.heads[0];
        let hc = &out.group.heads[0];
        assert!(h.q.matmul_t(&h.k).max_abs_diff(&hc.q.matmul_t(&hc.k)) < 1e-9);
    }

    #[test]
    fn vo_identity_full_rank_and_zero_output() {
        let mut rng = substream(3, "vo");
        let g = rand_vo(&mut rng, 8, 2, 4);
        let c = identity_corr(8);
        let out = compress_vo(&g, &c, 4).unwrap();
        for (h, hc) in g.heads.iter().zip(&out.group.heads) {
            assert!(h.v.matmul(&h.o).max_abs_diff(&hc.v.matmul(&hc.o)) < 1e-9);
        }
        let mut zero = g.clone();
        for h in &mut zero.heads {
            h.o = Matrix::zeros(4, 8);
        }
        let out = compress_vo(&zero, &c, 2).unwrap();
        assert_eq!(out.predicted_error, 0.0);
        for hc in &out.group.heads {
            assert_eq!(hc.v.matmul(&hc.o).max_abs(), 0.0);
        }
    }

    #[test]
    fn attention_rank_bounds() {
        let mut rng = substream(4, "bounds");
        let g = rand_vo(&mut rng, 8, 2, 4);
        let c = identity_corr(8);
        assert!(matches!(compress_vo(&g, &c, 0), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(compress_vo(&g, &c, 5), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(compress_vo(&g, &identity_corr(7), 2), Err(Error::Shape(_))));
    }

    #[test]
    fn singular_whitening_is_reported() {
        let mut rng = substream(5, "sing");
        let g = rand_vo(&mut rng, 4, 1, 2);
        let c = MixedCorrelation::from_matrix("c", Matrix::diag(&[1.0, 1.0, 1.0, 0.0])).unwrap();
        assert!(matches!(compress_vo(&g, &c, 1), Err(Error::WhiteningSingular(_))));
    }

    #[test]
    fn ffn_full_width_is_a_permutation() {
        let mut rng = substream(6, "ffn-full");
        let g = rand_ffn(&mut rng, 4, 8, Gate::Gelu);
        let x = gaussian_matrix(&mut rng, 64, 4);
        let z = g.intermediate(&x);
        let k = z.t_matmul(&z);
        let out = compress_ffn(&g, &k, 8).unwrap();
        let sel = out.selection.clone().unwrap();
        let mut idx = sel.indices().to_vec();
        idx.sort_unstable();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
        assert!(out.group.w_d.max_abs_diff(&sel.apply_rows(&g.w_d)) < 1e-9);
        assert!(g.forward(&x).max_abs_diff(&out.group.forward(&x)) < 1e-9);
    }

    #[test]
    fn ffn_identity_correlation_keeps_selected_rows() {
        let mut rng = substream(7, "ffn-id");
        let g = rand_ffn(&mut rng, 4, 8, Gate::Silu);
        let out = compress_ffn(&g, &Matrix::identity(8), 3).unwrap();
        let sel = out.selection.unwrap();
        assert_eq!(sel.indices(), &[0, 1, 2]);
        assert!(out.group.w_d.max_abs_diff(&sel.apply_rows(&g.w_d)) < 1e-15);
        assert!((out.predicted_error.powi(2) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ffn_dead_channels_are_skipped() {
        let k = Matrix::diag(&[0.0, 2.0, 0.0, 1.0]);
        let sel = select_ffn_channels(&k, 2).unwrap();
        assert_eq!(sel.indices(), &[1, 3]);
        let sel = select_ffn_channels(&k, 4).unwrap();
        assert_eq!(sel.indices(), &[1, 3, 0, 2]);
    }

    #[test]
    fn ffn_errors() {
        let mut rng = substream(8, "ffn-err");
        let g = rand_ffn(&mut rng, 4, 8, Gate::Gelu);
        assert!(matches!(
            compress_ffn(&g, &Matrix::identity(8), 9),
            Err(Error::RankOutOfRange { .. })
        ));
        let mut asym = Matrix::identity(8);
        asym[(0, 1)] = 0.5;
        assert!(matches!(compress_ffn(&g, &asym, 2), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn selection_commutes_with_gates() {
        let mut rng = substream(9, "commute");
        let x = gaussian_matrix(&mut rng, 10, 5);
        let w = gaussian_matrix(&mut rng, 5, 12);
        let sel = ColumnSelection::new(12, vec![7, 2, 11, 0]).unwrap();
        for gate in [Gate::Gelu, Gate::Silu, Gate::Identity] {
            let lhs = sel.apply(&x.matmul(&w).map(|v| gate.apply(v)));
            let rhs = x.matmul(&sel.apply(&w)).map(|v| gate.apply(v));
            assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn predicted_error_monotone_in_rank() {
        let mut rng = substream(10, "mono");
        let g = rand_vo(&mut rng, 8, 2, 4);
        let a = gaussian_matrix(&mut rng, 20, 8);
        let c = MixedCorrelation::from_matrix("c", a.t_matmul(&a)).unwrap();
        let errs: Vec<f64> = (1..=4).map(|r| compress_vo(&g, &c, r).unwrap().predicted_error).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]));

        let f = rand_ffn(&mut rng, 4, 10, Gate::Gelu);
        let z = f.intermediate(&gaussian_matrix(&mut rng, 40, 4));
        let k = z.t_matmul(&z);
        let errs: Vec<f64> = (1..=10).map(|k_| compress_ffn(&f, &k, k_).unwrap().predicted_error).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-9 * errs[0]));
    }

    #[test]
    fn head_order_does_not_matter() {
        let mut rng = substream(11, "order");
        let g = rand_qk(&mut rng, 8, 3, 4);
        let a = gaussian_matrix(&mut rng, 30, 8);
        let c = MixedCorrelation::from_matrix("c", a.t_matmul(&a)).unwrap();
        let fwd = compress_qk(&g, &c, &c, 2).unwrap();
        let mut rev = g.clone();
        rev.heads.reverse();
        let mut back = compress_qk(&rev, &c, &c, 2).unwrap();
        back.group.heads.reverse();
        assert_eq!(fwd.group, back.group);
    }

    /// Naive triple-loop evaluation of the QK objective.
    fn qk_loss_naive(a: &QkGroup, b: &QkGroup, xs: &[Matrix]) -> f64 {
        let mut total = 0.0;
        for x in xs {
            for (h, hc) in a.heads.iter().zip(&b.heads) {
                for s in 0..x.rows() {
                    for t in 0..x.rows() {
                        let mut diff = 0.0;
                        for i in 0..x.cols() {
                            for j in 0..x.cols() {
                                let mut w = 0.0;
                                for c in 0..h.q.cols() {
                                    w += h.q[(i, c)] * h.k[(j, c)];
                                }
                                for c in 0..hc.q.cols() {
                                    w -= hc.q[(i, c)] * hc.k[(j, c)];
                                }
                                diff += x[(s, i)] * w * x[(t, j)];
                            }
                        }
                        total += diff * diff;
                    }
                }
            }
        }
        total
    }

    #[test]
    fn qk_loss_matches_naive() {
        let mut rng = substream(12, "naive");
        let g = rand_qk(&mut rng, 5, 2, 3);
        let xs: Vec<Matrix> = (0..2).map(|_| gaussian_matrix(&mut rng, 4, 5)).collect();
        let c = identity_corr(5);
        let comp = compress_qk(&g, &c, &c, 1).unwrap().group;
        let fast = qk_loss(&g, &comp, &xs, None).unwrap();
        let slow = qk_loss_naive(&g, &comp, &xs);
        assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0));
        assert_eq!(qk_loss(&g, &g, &xs, None).unwrap(), 0.0);
        let zeros = vec![Matrix::zeros(4, 5)];
        assert_eq!(qk_loss(&g, &comp, &zeros, None).unwrap(), 0.0);
    }

    #[test]
    fn dispatch_rejects_mixed_types() {
        let mut rng = substream(13, "dispatch");
        let a = WeightGroup::Qk(rand_qk(&mut rng, 4, 1, 2));
        let b = WeightGroup::Vo(rand_vo(&mut rng, 4, 1, 2));
        assert!(reconstruction_loss(&a, &b, &LossBatch::default()).is_err());
        assert_eq!(a.family(), Family::Qk);
    }
}
