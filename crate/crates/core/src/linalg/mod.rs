//! Dense linear-algebra kernels: truncated SVD, column-pivoted QR selection,
//! PSD roots, pseudo-inverse and Nyström residuals.
//!
//! Everything is computed in `f64`. The SVD and symmetric eigendecomposition
//! are delegated to `faer`; pivoted QR is implemented here because the
//! pivot order (including tie handling) is part of the contract.

mod matrix;

use serde::{Deserialize, Serialize};

pub use matrix::Matrix;

use crate::error::{Error, Result};

/// Relative tolerance used to accept a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Scale of the default eigenvalue floor relative to `trace / dim`.
pub const DEFAULT_FLOOR_SCALE: f64 = 1e-8;

/// Singular triplets, largest first.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `U · diag(s) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.rank(), |i, j| {
            self.u[(i, j)] * self.singular_values[j]
        });
        us.matmul_t(&self.v)
    }
}

/// Ordered column subset of a matrix with `source_dim` columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSelection {
    source_dim: usize,
    selected: Vec<usize>,
}

impl ColumnSelection {
    pub fn new(source_dim: usize, selected: Vec<usize>) -> Result<Self> {
        if selected.is_empty() {
            return Err(Error::RankOutOfRange {
                rank: 0,
                max: source_dim,
            });
        }
        let mut seen = vec![false; source_dim];
        for &i in &selected {
            if i >= source_dim {
                return Err(Error::InvalidMatrix(format!(
                    "selected column {i} >= source dimension {source_dim}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidMatrix(format!("column {i} selected twice")));
            }
        }
        Ok(Self {
            source_dim,
            selected,
        })
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn indices(&self) -> &[usize] {
        &self.selected
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// `A · M`: the selected columns of `a`, in selection order.
    pub fn apply(&self, a: &Matrix) -> Matrix {
        assert_eq!(a.cols(), self.source_dim, "selection width mismatch");
        a.select_columns(&self.selected)
    }

    /// `Mᵀ · A`: the selected rows of `a`.
    pub fn apply_rows(&self, a: &Matrix) -> Matrix {
        assert_eq!(a.rows(), self.source_dim, "selection height mismatch");
        a.select_rows(&self.selected)
    }

    /// The explicit 0/1 selection matrix (`source_dim × k`).
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.source_dim, self.selected.len());
        for (j, &i) in self.selected.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        m
    }

    /// First `k` entries of this selection.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.selected.len() {
            return Err(Error::RankOutOfRange {
                rank: k,
                max: self.selected.len(),
            });
        }
        Ok(Self {
            source_dim: self.source_dim,
            selected: self.selected[..k].to_vec(),
        })
    }
}

fn check_finite(a: &Matrix) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidMatrix("non-finite entries".into()))
    }
}

/// Full thin SVD with singular values sorted in descending order.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    check_finite(a)?;
    let (m, n) = a.shape();
    let p = m.min(n);
    if p == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(m, 0),
            singular_values: Vec::new(),
            v: Matrix::zeros(n, 0),
        });
    }
    let dec = a
        .to_faer()
        .thin_svd()
        .map_err(|e| Error::InvalidMatrix(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S().column_vector(), dec.V());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    Ok(SvdResult {
        u: Matrix::from_fn(m, p, |i, j| u[(i, order[j])]),
        singular_values: order.iter().map(|&k| s[k].max(0.0)).collect(),
        v: Matrix::from_fn(n, p, |i, j| v[(i, order[j])]),
    })
}

/// Top-`rank` singular triplets of `a` and the discarded energy `Σ_{i>rank} σ_i²`.
pub fn svd_truncate(a: &Matrix, rank: usize) -> Result<(SvdResult, f64)> {
    check_finite(a)?;
    let max = a.rows().min(a.cols());
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    let full = svd(a)?;
    let tail: f64 = full.singular_values[rank..].iter().map(|s| s * s).sum();
    Ok((
        SvdResult {
            u: full.u.column_block(0, rank),
            singular_values: full.singular_values[..rank].to_vec(),
            v: full.v.column_block(0, rank),
        },
        tail,
    ))
}

/// Outcome of a (possibly partial) column-pivoted QR.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    pub selection: ColumnSelection,
    /// `|R_jj|` for each pivot step; non-increasing.
    pub pivot_magnitudes: Vec<f64>,
}

const PIVOT_TIE: f64 = 1e-12;

/// Runs `k` steps of Householder QR with column pivoting.
///
/// The pivot at every step is the trailing column with the largest residual
/// norm. Norms within a relative `1e-12` band count as ties and go to the
/// lowest original column index.
pub fn cpqr(a: &Matrix, k: usize) -> Result<PivotedQr> {
    check_finite(a)?;
    let (m, n) = a.shape();
    if k == 0 || k > n {
        return Err(Error::RankOutOfRange { rank: k, max: n });
    }
    // Column-major working copy keeps the Householder updates contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut magnitudes = Vec::with_capacity(k);

    for step in 0..k {
        let mut best = step;
        let mut best_norm = -1.0f64;
        for c in step..n {
            let norm = if step < m {
                cols[c][step..].iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                0.0
            };
            let wins = if best_norm < 0.0 {
                true
            } else {
                let band = PIVOT_TIE * best_norm.max(norm);
                norm > best_norm + band || ((norm - best_norm).abs() <= band && perm[c] < perm[best])
            };
            if wins {
                best = c;
                best_norm = norm;
            }
        }
        cols.swap(step, best);
        perm.swap(step, best);
        magnitudes.push(best_norm);

        if step >= m || best_norm == 0.0 {
            continue;
        }
        // Householder reflector zeroing cols[step][step+1..].
        let x = &cols[step][step..];
        let alpha = if x[0] >= 0.0 { -best_norm } else { best_norm };
        let mut v: Vec<f64> = x.to_vec();
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|t| t * t).sum();
        if vnorm_sq == 0.0 {
            continue;
        }
        for col in cols.iter_mut().skip(step) {
            let tail = &mut col[step..];
            let dot: f64 = v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm_sq;
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= f * vi;
            }
        }
    }
    Ok(PivotedQr {
        selection: ColumnSelection::new(n, perm[..k].to_vec())?,
        pivot_magnitudes: magnitudes,
    })
}

/// First `k` pivot columns of column-pivoted QR on `a`.
pub fn cpqr_select(a: &Matrix, k: usize) -> Result<ColumnSelection> {
    Ok(cpqr(a, k)?.selection)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
/// Returns `(eigenvalues, eigenvectors as columns)`.
pub fn symmetric_eigen(c: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    check_finite(c)?;
    if !c.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            c.rows(),
            c.cols()
        )));
    }
    let scale = c.max_abs().max(1.0);
    let asym = c.asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let n = c.rows();
    let eig = c
        .symmetrized()
        .to_faer()
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::InvalidMatrix(format!("eigendecomposition did not converge: {e:?}")))?;
    let (lambda, u) = (eig.S().column_vector(), eig.U());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| lambda[j].total_cmp(&lambda[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&k| lambda[k]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| u[(i, order[j])]);
    Ok((values, vectors))
}

/// `V · diag(f(λ)) · Vᵀ`, symmetrized.
fn spectral_map(values: &[f64], vectors: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let n = vectors.rows();
    let scaled = Matrix::from_fn(n, n, |i, j| vectors[(i, j)] * f(values[j]));
    scaled.matmul_t(vectors).symmetrized()
}

/// Symmetric PSD square root. Eigenvalues below zero are clamped to zero.
pub fn psd_sqrt(c: &Matrix) -> Result<Matrix> {
    let (values, vectors) = symmetric_eigen(c)?;
    Ok(spectral_map(&values, &vectors, |l| l.max(0.0).sqrt()))
}

/// Inverse PSD square root with eigenvalues floored at `eps` before inversion.
pub fn psd_inv_sqrt(c: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidMatrix(format!("eigenvalue floor must be positive, got {eps}")));
    }
    let (values, vectors) = symmetric_eigen(c)?;
    Ok(spectral_map(&values, &vectors, |l| 1.0 / l.max(eps).sqrt()))
}

/// Default scale-relative eigenvalue floor: `1e-8 · trace / dim`.
///
/// Falls back to an absolute `1e-12` when the trace is zero.
pub fn default_floor(c: &Matrix) -> f64 {
    let dim = c.rows().max(1) as f64;
    let f = DEFAULT_FLOOR_SCALE * c.trace() / dim;
    if f > 0.0 && f.is_finite() {
        f
    } else {
        1e-12
    }
}

/// Moore–Penrose pseudo-inverse; singular values below `rcond · σ_max` count as zero.
pub fn pinv(a: &Matrix, rcond: f64) -> Result<Matrix> {
    let dec = svd(a)?;
    let smax = dec.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = rcond * smax;
    let (m, n) = a.shape();
    let mut out = Matrix::zeros(n, m);
    for (k, &s) in dec.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for i in 0..n {
            let vi = dec.v[(i, k)] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..m {
                out[(i, j)] += vi * dec.u[(j, k)];
            }
        }
    }
    Ok(out)
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.singular_values.first().copied().unwrap_or(0.0))
}

/// Default relative cutoff used by [`pinv`] callers in this crate.
pub const PINV_RCOND: f64 = 1e-13;

/// Nyström residual `K − K·M·(MᵀKM)⁺·MᵀK` for a column selection `M`.
pub fn nystrom_residual(k: &Matrix, selection: &ColumnSelection) -> Result<Matrix> {
    if !k.is_square() || k.rows() != selection.source_dim() {
        return Err(Error::Shape(format!(
            "Nyström residual needs a {0}x{0} matrix, got {1}x{2}",
            selection.source_dim(),
            k.rows(),
            k.cols()
        )));
    }
    let km = selection.apply(k);
    let core = selection.apply_rows(&km);
    let approx = km.matmul(&pinv(&core, PINV_RCOND)?).matmul_t(&km);
    Ok(k.sub(&approx))
}
