//! Semantic calibration coreset selection.
//!
//! A pool of prompt embeddings is reduced to a small, well-spread subset:
//! geometric median → distinctiveness `‖E_i − c‖` → quantile bins with
//! proportional quotas → farthest-point sampling under cosine distance within
//! each bin → greedy cosine de-duplication.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::bundle::{Tensor, TensorBundle};

/// Tensor name of the `n×d` embedding matrix inside an embedding bundle.
pub const EMBEDDINGS_TENSOR: &str = "embeddings";

/// Prompt embeddings with their ids.
#[derive(Debug, Clone)]
pub struct EmbeddingPool {
    vectors: Matrix,
    ids: Vec<String>,
}

impl EmbeddingPool {
    pub fn new(vectors: Matrix, ids: Vec<String>) -> Result<Self> {
        if vectors.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} embeddings but {} ids",
                vectors.rows(),
                ids.len()
            )));
        }
        if vectors.rows() == 0 || vectors.cols() == 0 {
            return Err(Error::DegenerateInput("empty embedding pool".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::InvalidMatrix("non-finite embedding".into()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate embedding id '{id}'")));
            }
        }
        for i in 0..vectors.rows() {
            if norm(vectors.row(i)) == 0.0 {
                return Err(Error::DegenerateInput(format!("embedding '{}' has zero norm", ids[i])));
            }
        }
        Ok(Self { vectors, ids })
    }

    /// Pool with ids `"0"`, `"1"`, ….
    pub fn with_index_ids(vectors: Matrix) -> Result<Self> {
        let ids = (0..vectors.rows()).map(|i| i.to_string()).collect();
        Self::new(vectors, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Reads the `embeddings` tensor and its `ids` list from a bundle. Ids
    /// default to row indices when the list is absent.
    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let t = bundle.require(EMBEDDINGS_TENSOR)?;
        let vectors = t.to_matrix()?;
        let ids = match t.meta.get("ids").or_else(|| bundle.metadata.get("ids")) {
            None => return Self::with_index_ids(vectors),
            Some(v) => v
                .as_array()
                .and_then(|a| a.iter().map(|x| x.as_str().map(str::to_owned)).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Error::Manifest("embedding ids must be a list of strings".into()))?,
        };
        Self::new(vectors, ids)
    }

    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        b.metadata.insert("kind".into(), "embeddings".into());
        let t = Tensor::from_matrix(EMBEDDINGS_TENSOR, &self.vectors).with_meta("ids", self.ids.clone());
        b.push(t).expect("single tensor");
        b
    }

    /// Sub-pool of the given row indices (in that order).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.vectors.select_rows(indices),
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetConfig {
    pub target_size: usize,
    pub bins: usize,
    pub dedup_threshold: f64,
    pub median_tol: f64,
    pub median_max_iter: usize,
}

impl CoresetConfig {
    pub fn new(target_size: usize, bins: usize) -> Self {
        Self {
            target_size,
            bins,
            ..Self::default()
        }
    }

    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("coreset size must be at least 1".into()));
        }
        if self.target_size > pool_size {
            return Err(Error::Config(format!(
                "coreset size {} exceeds pool size {pool_size}",
                self.target_size
            )));
        }
        if self.bins == 0 {
            return Err(Error::Config("need at least one bin".into()));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "dedup threshold must lie in (0, 1], got {}",
                self.dedup_threshold
            )));
        }
        if !(self.median_tol > 0.0) || self.median_max_iter == 0 {
            return Err(Error::Config("median tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

impl Default for CoresetConfig {
    fn default() -> Self {
        Self {
            target_size: 500,
            bins: 8,
            dedup_threshold: 0.95,
            median_tol: 1e-10,
            median_max_iter: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    pub selected_ids: Vec<String>,
    /// Row indices into the source pool, aligned with `selected_ids`.
    pub selected_indices: Vec<usize>,
    pub distinctiveness: BTreeMap<String, f64>,
    pub median: Vec<f64>,
    pub median_iterations: usize,
    pub median_converged: bool,
    pub quotas: Vec<usize>,
    pub config: CoresetConfig,
}

/// Weiszfeld iterate for the geometric median.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMedian {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Weiszfeld iteration started from the coordinate-wise mean.
///
/// Stops once an update moves less than `tol`. An iterate that coincides with a
/// data point is nudged by `1e-9 · scale` to step off the singularity.
pub fn geometric_median(points: &Matrix, tol: f64, max_iter: usize) -> GeometricMedian {
    let (n, d) = points.shape();
    if n == 1 {
        return GeometricMedian {
            point: points.row(0).to_vec(),
            iterations: 0,
            converged: true,
        };
    }
    let mut c = vec![0.0; d];
    for i in 0..n {
        for (cj, x) in c.iter_mut().zip(points.row(i)) {
            *cj += x / n as f64;
        }
    }
    let scale = (0..n).map(|i| norm(points.row(i))).fold(0.0, f64::max).max(1.0);
    for iter in 1..=max_iter {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        let mut hit = false;
        for i in 0..n {
            let row = points.row(i);
            let dist = distance(row, &c);
            if dist == 0.0 {
                hit = true;
                break;
            }
            let w = 1.0 / dist;
            den += w;
            for (nj, x) in num.iter_mut().zip(row) {
                *nj += w * x;
            }
        }
        if hit {
            for cj in c.iter_mut() {
                *cj += 1e-9 * scale;
            }
            continue;
        }
        let next: Vec<f64> = num.iter().map(|v| v / den).collect();
        let step = distance(&next, &c);
        c = next;
        if step < tol {
            return GeometricMedian {
                point: c,
                iterations: iter,
                converged: true,
            };
        }
    }
    GeometricMedian {
        point: c,
        iterations: max_iter,
        converged: false,
    }
}

/// `f_i = ‖E_i − c‖₂` for every row.
pub fn distinctiveness(points: &Matrix, median: &[f64]) -> Result<Vec<f64>> {
    if median.len() != points.cols() {
        return Err(Error::Shape(format!(
            "median has dim {}, embeddings have dim {}",
            median.len(),
            points.cols()
        )));
    }
    Ok((0..points.rows()).map(|i| distance(points.row(i), median)).collect())
}

/// Quantile bins over scores and their quotas.
#[derive(Debug, Clone, PartialEq)]
pub struct BinAllocation {
    /// Pool indices per bin, lowest scores first.
    pub bins: Vec<Vec<usize>>,
    pub quotas: Vec<usize>,
}

/// Largest-remainder apportionment of `target` proportional to `sizes`.
/// Remainder ties go to the lower bin index.
pub fn proportional_quotas(sizes: &[usize], target: usize) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if target > total {
        return Err(Error::Config(format!(
            "target {target} exceeds population {total}"
        )));
    }
    if total == 0 {
        return Ok(vec![0; sizes.len()]);
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|&s| target * s / total).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // Remainders compared exactly as integers: (target·s) mod total.
    order.sort_by(|&a, &b| {
        let ra = (target * sizes[a]) % total;
        let rb = (target * sizes[b]) % total;
        rb.cmp(&ra).then(a.cmp(&b))
    });
    for &b in order.iter().take(target - assigned) {
        quotas[b] += 1;
    }
    Ok(quotas)
}

/// Splits scores into `bins` near-equal-population quantile bins and assigns quotas.
pub fn allocate_bins(scores: &[f64], bins: usize, target: usize) -> Result<BinAllocation> {
    let n = scores.len();
    if bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    if target > n {
        return Err(Error::Config(format!("target {target} exceeds pool size {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let distinct = {
        let mut count = 0;
        let mut last = None;
        for &i in &order {
            if last != Some(scores[i]) {
                count += 1;
                last = Some(scores[i]);
            }
        }
        count
    };
    if bins > distinct {
        return Err(Error::Config(format!(
            "{bins} bins requested but only {distinct} distinct scores"
        )));
    }
    let groups: Vec<Vec<usize>> = (0..bins)
        .map(|b| order[b * n / bins..(b + 1) * n / bins].to_vec())
        .collect();
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let quotas = proportional_quotas(&sizes, target)?;
    Ok(BinAllocation {
        bins: groups,
        quotas,
    })
}

/// Greedy farthest-point sampling under cosine distance `1 − cos`.
///
/// Seeds with the highest-`scores` row; every later pick maximizes the minimum
/// distance to the picks so far. Ties go to the lowest row index. Returns row
/// indices into `vectors`.
pub fn fps_sample(vectors: &Matrix, scores: &[f64], quota: usize) -> Result<Vec<usize>> {
    let n = vectors.rows();
    if scores.len() != n {
        return Err(Error::Shape("scores and vectors disagree in length".into()));
    }
    if quota == 0 {
        return Ok(Vec::new());
    }
    if quota > n {
        return Err(Error::Config(format!("quota {quota} exceeds bin size {n}")));
    }
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = vectors.row(i);
            let len = norm(r);
            r.iter().map(|x| x / len).collect()
        })
        .collect();
    let seed = (0..n)
        .reduce(|best, i| if scores[i] > scores[best] { i } else { best })
        .expect("non-empty bin");
    let mut picked = vec![seed];
    let mut taken = vec![false; n];
    taken[seed] = true;
    let mut min_dist = vec![f64::INFINITY; n];
    let mut last = seed;
    while picked.len() < quota {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let dot: f64 = unit[i].iter().zip(&unit[last]).map(|(a, b)| a * b).sum();
            min_dist[i] = min_dist[i].min(1.0 - dot);
            if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                best = Some(i);
            }
        }
        let next = best.expect("quota <= bin size");
        taken[next] = true;
        picked.push(next);
        last = next;
    }
    Ok(picked)
}

/// Greedy pass in `order`, dropping any row whose cosine similarity to an
/// already kept row exceeds `threshold`.
pub fn dedup(vectors: &Matrix, order: &[usize], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for &i in order {
        let row = vectors.row(i);
        if kept.iter().all(|&k| cosine(row, vectors.row(k)) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Full coreset pipeline. Deterministic for a fixed pool and config.
pub fn build_coreset(pool: &EmbeddingPool, config: &CoresetConfig) -> Result<Coreset> {
    config.validate(pool.len())?;
    let vectors = pool.vectors();
    let median = geometric_median(vectors, config.median_tol, config.median_max_iter);
    let f = distinctiveness(vectors, &median.point)?;
    let allocation = allocate_bins(&f, config.bins, config.target_size)?;

    let sample_bin = |(members, &quota): (&Vec<usize>, &usize)| -> Result<Vec<usize>> {
        if quota > 0 && members.is_empty() {
            return Err(Error::Config("empty bin with a positive quota".into()));
        }
        let local = vectors.select_rows(members);
        let local_scores: Vec<f64> = members.iter().map(|&i| f[i]).collect();
        Ok(fps_sample(&local, &local_scores, quota)?
            .into_iter()
            .map(|j| members[j])
            .collect())
    };
    let per_bin: Vec<Vec<usize>> = {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            allocation
                .bins
                .par_iter()
                .zip(allocation.quotas.par_iter())
                .map(sample_bin)
                .collect::<Result<_>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            allocation
                .bins
                .iter()
                .zip(allocation.quotas.iter())
                .map(sample_bin)
                .collect::<Result<_>>()?
        }
    };
    let ordered: Vec<usize> = per_bin.into_iter().flatten().collect();
    let kept = dedup(vectors, &ordered, config.dedup_threshold);

    Ok(Coreset {
        selected_ids: kept.iter().map(|&i| pool.ids()[i].clone()).collect(),
        selected_indices: kept,
        distinctiveness: pool.ids().iter().cloned().zip(f).collect(),
        median: median.point,
        median_iterations: median.iterations,
        median_converged: median.converged,
        quotas: allocation.quotas,
        config: config.clone(),
    })
}

/// Centered covariance of the rows.
pub fn covariance(rows: &Matrix) -> Matrix {
    let (n, d) = rows.shape();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(rows.row(i)) {
            *m += x / n as f64;
        }
    }
    let centered = Matrix::from_fn(n, d, |i, j| rows[(i, j)] - mean[j]);
    centered.t_matmul(&centered).scale(1.0 / n.max(1) as f64)
}

/// Cosines of the principal angles between the top-`k` eigen-subspaces of two
/// symmetric matrices, largest first.
pub fn principal_cosines(a: &Matrix, b: &Matrix, k: usize) -> Result<Vec<f64>> {
    let (_, va) = linalg::symmetric_eigen(a)?;
    let (_, vb) = linalg::symmetric_eigen(b)?;
    if k == 0 || k > va.cols() || va.cols() != vb.cols() {
        return Err(Error::RankOutOfRange {
            rank: k,
            max: va.cols().min(vb.cols()),
        });
    }
    let cross = va.column_block(0, k).t_matmul(&vb.column_block(0, k));
    Ok(linalg::svd(&cross)?
        .singular_values
        .into_iter()
        .map(|s| s.min(1.0))
        .collect())
}

/// Mean squared principal cosine between the top-`k` covariance subspaces of
/// two embedding sets; 1.0 means identical subspaces.
pub fn subspace_overlap(a: &Matrix, b: &Matrix, k: usize) -> Result<f64> {
    let cos = principal_cosines(&covariance(a), &covariance(b), k)?;
    Ok(cos.iter().map(|c| c * c).sum::<f64>() / k as f64)
}
