//! Browser demo: three small interactive views onto slimkit.
//!
//! Each operation has a plain Rust entry point returning a serializable value
//! and a `wasm_bindgen` wrapper that returns it as a JSON string.

use rand::Rng;
use serde::Serialize;
use slimkit::alloc;
use slimkit::calib::{CorrelationStat, InputKind, MixedCorrelation, StatKey, DEFAULT_LAMBDA};
use slimkit::linalg::{self, Matrix};
use slimkit::madac::{self, AttentionKind, VoGroup, VoHead};
use slimkit::rng::{gaussian, gaussian_matrix, substream};
use slimkit::slimset::{self, CoresetConfig, EmbeddingPool};
use slimkit::Result;
use wasm_bindgen::prelude::*;

/// Width every explorer block is mapped onto.
pub const EXPLORER_WIDTH: usize = 64;
const EXPLORER_R_MIN: usize = 8;
const EXPLORER_MULTIPLE: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct AllocationView {
    pub epsilon: f64,
    pub scores: Vec<f64>,
    /// Fraction of each block removed.
    pub sparsity: Vec<f64>,
    /// Rank kept out of `EXPLORER_WIDTH`.
    pub ranks: Vec<usize>,
}

/// Softmax sparsity for the given scores at mean sparsity `phi_bar`.
/// A non-positive `epsilon` selects the default temperature.
pub fn allocation_view(scores: &[f64], phi_bar: f64, epsilon: f64) -> Result<AllocationView> {
    let epsilon = if epsilon > 0.0 { epsilon } else { alloc::default_epsilon(scores) };
    let sparsity = alloc::softmax_sparsity(scores, phi_bar, epsilon)?;
    let ranks = sparsity
        .iter()
        .map(|&phi| alloc::map_rank(1.0 - phi, EXPLORER_WIDTH, EXPLORER_R_MIN, EXPLORER_MULTIPLE))
        .collect();
    Ok(AllocationView {
        epsilon,
        scores: scores.to_vec(),
        sparsity,
        ranks,
    })
}

/// Parses comma- or whitespace-separated scores.
pub fn parse_scores(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| slimkit::Error::Config(format!("not a score: '{s}'")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationView {
    pub ranks: Vec<usize>,
    /// Mean squared output error of truncating the product directly.
    pub plain: Vec<f64>,
    /// The same error after truncating in the whitened basis.
    pub whitened: Vec<f64>,
    /// Spectral tail of the whitened product, measured against the regularized correlation.
    pub predicted: Vec<f64>,
    /// `‖W − W_r‖_F²` of the direct truncation.
    pub plain_tail: Vec<f64>,
    /// Diagonal ridge added before whitening.
    pub ridge: f64,
    /// Eigenvalues of the input correlation, largest first.
    pub input_spectrum: Vec<f64>,
}

/// One value–output head on anisotropic inputs whose scale decays by `decay`
/// per direction, truncated at every rank with and without whitening.
pub fn truncation_view(seed: u64, d: usize, decay: f64) -> Result<TruncationView> {
    if !(2..=64).contains(&d) {
        return Err(slimkit::Error::Config(format!("width must be in 2..=64, got {d}")));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(slimkit::Error::Config(format!("decay must be in (0, 1], got {decay}")));
    }
    let n = 8 * d;
    let h = (d / 2).max(1);
    let mut rng = substream(seed, "demo/truncation");
    let mixing = gaussian_matrix(&mut rng, d, d).scale(1.0 / (d as f64).sqrt());
    let x = Matrix::from_fn(n, d, |_, j| decay.powi(j as i32) * gaussian(&mut rng)).matmul(&mixing);
    let head = VoHead {
        v: gaussian_matrix(&mut rng, d, h),
        o: gaussian_matrix(&mut rng, h, d),
    };
    let w = head.v.matmul(&head.o);
    let group = VoGroup::new(AttentionKind::SelfAttention, vec![head])?;
    let mut stat = CorrelationStat::new(StatKey::new("demo", InputKind::SaInput, 0), d)?;
    stat.accumulate(&x)?;
    let regularized = stat.finalize(DEFAULT_LAMBDA)?;
    let moment = x.t_matmul(&x).scale(1.0 / n as f64);
    let ridge = DEFAULT_LAMBDA * moment.trace() / d as f64;
    let (mut input_spectrum, _) = linalg::symmetric_eigen(&moment)?;
    input_spectrum.sort_by(|a, b| b.total_cmp(a));
    let mixed = MixedCorrelation::from_matrix("demo", regularized.c_tilde)?;
    let output_error = |approx: &Matrix| x.matmul(&w.sub(approx)).frobenius_norm_sq() / n as f64;

    let mut view = TruncationView {
        ranks: Vec::new(),
        plain: Vec::new(),
        whitened: Vec::new(),
        predicted: Vec::new(),
        plain_tail: Vec::new(),
        ridge,
        input_spectrum,
    };
    for r in 1..=h {
        let (svd, tail) = linalg::svd_truncate(&w, r)?;
        let compressed = madac::compress_vo(&group, &mixed, r)?;
        let kept = &compressed.group.heads[0];
        view.ranks.push(r);
        view.plain.push(output_error(&svd.reconstruct()));
        view.whitened.push(output_error(&kept.v.matmul(&kept.o)));
        view.predicted.push(compressed.predicted_error);
        view.plain_tail.push(tail);
    }
    Ok(view)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoresetView {
    /// Planar coordinates of every pool point.
    pub points: Vec<[f64; 2]>,
    /// Distinctiveness bin of every point, lowest first.
    pub bin_of: Vec<usize>,
    /// Selected pool indices, in selection order.
    pub selected: Vec<usize>,
    pub quotas: Vec<usize>,
    pub median: [f64; 2],
}

/// Lift above the plane so cosine distance tracks planar position.
const LIFT: f64 = 1.5;
const CLUSTERS: [(f64, f64, f64); 4] = [(-1.2, 0.8, 0.35), (1.0, 1.1, 0.25), (0.3, -1.0, 0.45), (-1.6, -1.4, 0.15)];

/// A clustered planar pool and the coreset drawn from it.
pub fn coreset_view(seed: u64, n: usize, size: usize, bins: usize, dedup: f64) -> Result<CoresetView> {
    let mut rng = substream(seed, "demo/coreset");
    let rows: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            let (cx, cy, spread) = CLUSTERS[rng.random_range(0..CLUSTERS.len())];
            [cx + spread * gaussian(&mut rng), cy + spread * gaussian(&mut rng)]
        })
        .collect();
    let vectors = Matrix::from_fn(n, 3, |i, j| if j < 2 { rows[i][j] } else { LIFT });
    let pool = EmbeddingPool::with_index_ids(vectors.clone())?;
    let config = CoresetConfig {
        dedup_threshold: dedup,
        ..CoresetConfig::new(size, bins)
    };
    let core = slimset::build_coreset(&pool, &config)?;
    let scores = slimset::distinctiveness(&vectors, &core.median)?;
    let binned = slimset::allocate_bins(&scores, bins, size)?;
    let mut bin_of = vec![0; n];
    for (b, members) in binned.bins.iter().enumerate() {
        for &i in members {
            bin_of[i] = b;
        }
    }
    Ok(CoresetView {
        points: rows,
        bin_of,
        selected: core.selected_indices,
        quotas: core.quotas,
        median: [core.median[0], core.median[1]],
    })
}

fn to_json<T: Serialize>(value: Result<T>) -> std::result::Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = allocate)]
pub fn allocate_js(scores: &str, phi_bar: f64, epsilon: f64) -> std::result::Result<String, JsError> {
    to_json(parse_scores(scores).and_then(|s| allocation_view(&s, phi_bar, epsilon)))
}

#[wasm_bindgen(js_name = truncation)]
pub fn truncation_js(seed: u32, d: usize, decay: f64) -> std::result::Result<String, JsError> {
    to_json(truncation_view(seed as u64, d, decay))
}

#[wasm_bindgen(js_name = coreset)]
pub fn coreset_js(seed: u32, n: usize, size: usize, bins: usize, dedup: f64) -> std::result::Result<String, JsError> {
    to_json(coreset_view(seed as u64, n, size, bins, dedup))
}
