//! Calibrate → score → allocate → compress → report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::alloc::{AllocationPlan, AllocationProblem, BlockProfile};
use crate::calib::{
    self, CorrelationStat, InfluenceScore, InputKind, MixedCorrelation, RegularizedCorrelation,
    StatKey, Weighting,
};
use crate::error::{Error, Result};
use crate::linalg::{ColumnSelection, Matrix};
use crate::madac::{self, AttentionKind, Family};
use crate::model::toy::ToyCorpus;
use crate::model::{meta_str, Block, ModelGraph, Tensor, TensorBundle};

/// One tapped activation with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub prompt_id: String,
    pub layer_id: String,
    pub kind: InputKind,
    pub timestep: u32,
    pub data: Matrix,
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs the model over `prompts × timesteps` of the corpus and keeps every tap.
/// Text tokens are time invariant and recorded once per prompt, at timestep 0.
pub fn collect_activations(model: &ModelGraph, corpus: &ToyCorpus, prompts: &[usize]) -> Result<Vec<ActivationRecord>> {
    let runs: Vec<(usize, u32)> = prompts
        .iter()
        .flat_map(|&p| (0..corpus.timesteps).map(move |t| (p, t)))
        .collect();
    let per_run = par_map(&runs, |&(p, t)| -> Result<Vec<ActivationRecord>> {
        let (_, taps) = model.forward_with_taps(&corpus.latents(p, t), &corpus.text(p))?;
        Ok(taps
            .into_iter()
            .filter(|tap| t == 0 || !tap.kind.is_time_invariant())
            .map(|tap| ActivationRecord {
                prompt_id: corpus.prompt_ids[p].clone(),
                timestep: if tap.kind.is_time_invariant() { 0 } else { t },
                layer_id: tap.layer_id,
                kind: tap.kind,
                data: tap.data,
            })
            .collect())
    });
    let mut out = Vec::new();
    for r in per_run {
        out.extend(r?);
    }
    Ok(out)
}

pub fn activations_to_bundle(records: &[ActivationRecord]) -> TensorBundle {
    let mut bundle = TensorBundle::new();
    for (i, r) in records.iter().enumerate() {
        let t = Tensor::from_matrix(format!("act.{i:06}"), &r.data)
            .with_meta("layer_id", r.layer_id.as_str())
            .with_meta("input_kind", r.kind.as_str())
            .with_meta("timestep", r.timestep)
            .with_meta("samples", r.data.rows())
            .with_meta("prompt_id", r.prompt_id.as_str());
        bundle.push(t).expect("unique names");
    }
    bundle.metadata.insert("kind".into(), json!("activations"));
    bundle
}

/// Reads activation tensors. Tensors without a `prompt_id` get an empty one.
pub fn activations_from_bundle(bundle: &TensorBundle) -> Result<Vec<ActivationRecord>> {
    bundle
        .tensors()
        .iter()
        .map(|t| {
            let missing = |k: &str| Error::Manifest(format!("activation '{}' lacks '{k}' metadata", t.name));
            let layer_id = t.meta_str("layer_id").ok_or_else(|| missing("layer_id"))?;
            let kind: InputKind = t.meta_str("input_kind").ok_or_else(|| missing("input_kind"))?.parse()?;
            let timestep = t.meta_u64("timestep").ok_or_else(|| missing("timestep"))?;
            Ok(ActivationRecord {
                prompt_id: t.meta_str("prompt_id").unwrap_or_default().to_string(),
                layer_id: layer_id.to_string(),
                kind,
                timestep: u32::try_from(timestep).map_err(|_| missing("timestep"))?,
                data: t.to_matrix()?,
            })
        })
        .collect()
}

/// Folds records into one accumulator per (layer, kind, timestep).
pub fn accumulate(records: &[ActivationRecord]) -> Result<BTreeMap<StatKey, CorrelationStat>> {
    let mut out: BTreeMap<StatKey, CorrelationStat> = BTreeMap::new();
    for r in records {
        let key = StatKey::new(r.layer_id.clone(), r.kind, r.timestep);
        let stat = match out.entry(key) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => {
                let s = CorrelationStat::new(e.key().clone(), r.data.cols())?;
                e.insert(s)
            }
        };
        stat.accumulate(&r.data)?;
    }
    Ok(out)
}

/// Influence row for one (layer, kind, timestep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub layer_id: String,
    pub input_kind: InputKind,
    pub timestep: u32,
    pub trq: f64,
    /// Normalized eigenvalue entropy of the correlation.
    pub diversity: f64,
    pub samples: u64,
}

/// Everything compression needs from calibration.
#[derive(Debug, Clone)]
pub struct ModelStatistics {
    pub lambda: f64,
    pub weighting: Weighting,
    pub correlations: BTreeMap<StatKey, RegularizedCorrelation>,
    pub scores: Vec<ScoreRow>,
    pub mixed: BTreeMap<(String, InputKind), MixedCorrelation>,
}

/// Keys the model needs that `present` lacks, as `layer/kind/t=…` strings.
/// Time-varying kinds must cover every timestep seen for any time-varying
/// kind; text tokens need at least one entry.
pub fn missing_statistics(model: &ModelGraph, present: &BTreeSet<StatKey>) -> Vec<String> {
    let timesteps: BTreeSet<u32> = present
        .iter()
        .filter(|k| !k.input_kind.is_time_invariant())
        .map(|k| k.timestep)
        .collect();
    let timesteps = if timesteps.is_empty() { BTreeSet::from([0]) } else { timesteps };
    let mut missing = Vec::new();
    for b in &model.blocks {
        for &kind in b.required_kinds() {
            if kind.is_time_invariant() {
                if !present.iter().any(|k| k.layer_id == b.layer_id && k.input_kind == kind) {
                    missing.push(format!("{}/{kind}/t=0", b.layer_id));
                }
                continue;
            }
            for &t in &timesteps {
                if !present.contains(&StatKey::new(b.layer_id.clone(), kind, t)) {
                    missing.push(format!("{}/{kind}/t={t}", b.layer_id));
                }
            }
        }
    }
    missing
}

impl ModelStatistics {
    pub fn build(
        model: &ModelGraph,
        stats: &BTreeMap<StatKey, CorrelationStat>,
        lambda: f64,
        weighting: Weighting,
    ) -> Result<Self> {
        let keys: Vec<&StatKey> = stats.keys().collect();
        let finalized = par_map(&keys, |k| stats[*k].finalize(lambda));
        let mut correlations = BTreeMap::new();
        for (k, c) in keys.into_iter().zip(finalized) {
            correlations.insert(k.clone(), c?);
        }
        Self::from_correlations(model, correlations, lambda, weighting)
    }

    pub fn from_correlations(
        model: &ModelGraph,
        correlations: BTreeMap<StatKey, RegularizedCorrelation>,
        lambda: f64,
        weighting: Weighting,
    ) -> Result<Self> {
        let present: BTreeSet<StatKey> = correlations.keys().cloned().collect();
        let missing = missing_statistics(model, &present);
        if !missing.is_empty() {
            return Err(Error::MissingStatistics(missing));
        }
        let mut groups: BTreeMap<(String, InputKind), BTreeMap<u32, RegularizedCorrelation>> = BTreeMap::new();
        for (k, c) in &correlations {
            if model.block(&k.layer_id).is_some() {
                groups
                    .entry((k.layer_id.clone(), k.input_kind))
                    .or_default()
                    .insert(k.timestep, c.clone());
            }
        }
        let entries: Vec<_> = groups.into_iter().collect();
        let results = par_map(&entries, |((layer, kind), per_t)| -> Result<(Vec<ScoreRow>, MixedCorrelation)> {
            let block = model.block(layer).expect("filtered above");
            let w = block.trq_weight(*kind)?;
            let mut rows = Vec::with_capacity(per_t.len());
            let mut influence = Vec::with_capacity(per_t.len());
            for (&t, c) in per_t {
                let trq = calib::trq_score(&w, &c.c_tilde)?;
                rows.push(ScoreRow {
                    layer_id: layer.clone(),
                    input_kind: *kind,
                    timestep: t,
                    trq,
                    diversity: calib::spectral_entropy(&c.c_tilde)?,
                    samples: c.samples,
                });
                influence.push(InfluenceScore {
                    layer_id: layer.clone(),
                    timestep: t,
                    value: trq,
                });
            }
            let weights = calib::mixture_weights(&influence, weighting)?;
            Ok((rows, calib::mix(layer, per_t, &weights)?))
        });
        let mut scores = Vec::new();
        let mut mixed = BTreeMap::new();
        for (((layer, kind), _), r) in entries.iter().zip(results) {
            let (rows, m) = r?;
            scores.extend(rows);
            mixed.insert((layer.clone(), *kind), m);
        }
        Ok(Self {
            lambda,
            weighting,
            correlations,
            scores,
            mixed,
        })
    }

    pub fn mixed(&self, layer_id: &str, kind: InputKind) -> Result<&MixedCorrelation> {
        self.mixed
            .get(&(layer_id.to_string(), kind))
            .ok_or_else(|| Error::MissingStatistics(vec![format!("{layer_id}/{kind}")]))
    }

    pub fn timesteps(&self) -> BTreeSet<u32> {
        self.correlations.keys().map(|k| k.timestep).collect()
    }

    /// One line per (layer, kind, timestep): TRQ, diversity, samples and the
    /// mixture weight that timestep received.
    pub fn score_table(&self) -> String {
        let mut out = String::from("layer_id\tinput_kind\ttimestep\ttrq\tdiversity\tsamples\tweight\n");
        for r in &self.scores {
            let weight = self
                .mixed
                .get(&(r.layer_id.clone(), r.input_kind))
                .and_then(|m| m.weights.get(&r.timestep))
                .copied()
                .unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{:.6}",
                r.layer_id, r.input_kind, r.timestep, r.trq, r.diversity, r.samples, weight
            );
        }
        out
    }

    /// Per-key regularized correlations, the mixed correlation and its roots,
    /// with the TRQ table and mixture weights in the metadata.
    pub fn to_bundle(&self) -> TensorBundle {
        let mut bundle = TensorBundle::new();
        for (k, c) in &self.correlations {
            let t = Tensor::from_matrix(format!("corr.{}.{}.t{}", k.layer_id, k.input_kind, k.timestep), &c.c_tilde)
                .with_meta("layer_id", k.layer_id.as_str())
                .with_meta("input_kind", k.input_kind.as_str())
                .with_meta("timestep", k.timestep)
                .with_meta("samples", c.samples)
                .with_meta("lambda", c.lambda_used);
            bundle.push(t).expect("unique keys");
        }
        let mut weights = serde_json::Map::new();
        for ((layer, kind), m) in &self.mixed {
            for (part, mat) in [("c_bar", &m.c_bar), ("r_bar", &m.r_bar), ("r_bar_inv", &m.r_bar_inv)] {
                let t = Tensor::from_matrix(format!("mixed.{layer}.{kind}.{part}"), mat)
                    .with_meta("layer_id", layer.as_str())
                    .with_meta("input_kind", kind.as_str());
                bundle.push(t).expect("unique keys");
            }
            let w: serde_json::Map<String, Value> = m.weights.iter().map(|(t, w)| (t.to_string(), json!(w))).collect();
            weights.insert(format!("{layer}/{kind}"), Value::Object(w));
        }
        bundle.metadata.insert("kind".into(), json!("statistics"));
        bundle.metadata.insert("lambda".into(), json!(self.lambda));
        bundle.metadata.insert("weighting".into(), json!(self.weighting.to_string()));
        bundle.metadata.insert("trq".into(), serde_json::to_value(&self.scores).expect("serializable"));
        bundle.metadata.insert("mixture_weights".into(), Value::Object(weights));
        bundle
    }

    /// Rebuilds statistics from the per-key correlations of a bundle; scores,
    /// weights and roots are recomputed in f64.
    pub fn from_bundle(bundle: &TensorBundle, model: &ModelGraph) -> Result<Self> {
        let lambda = bundle
            .metadata
            .get("lambda")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Manifest("statistics bundle lacks 'lambda'".into()))?;
        let weighting: Weighting = meta_str(&bundle.metadata, "weighting")
            .ok_or_else(|| Error::Manifest("statistics bundle lacks 'weighting'".into()))?
            .parse()?;
        let mut correlations = BTreeMap::new();
        for t in bundle.tensors().iter().filter(|t| t.name.starts_with("corr.")) {
            let missing = |k: &str| Error::Manifest(format!("'{}' lacks '{k}' metadata", t.name));
            let key = StatKey::new(
                t.meta_str("layer_id").ok_or_else(|| missing("layer_id"))?,
                t.meta_str("input_kind").ok_or_else(|| missing("input_kind"))?.parse()?,
                u32::try_from(t.meta_u64("timestep").ok_or_else(|| missing("timestep"))?)
                    .map_err(|_| missing("timestep"))?,
            );
            correlations.insert(
                key.clone(),
                RegularizedCorrelation {
                    key,
                    c_tilde: t.to_matrix()?,
                    lambda_used: lambda,
                    samples: t.meta_u64("samples").unwrap_or(0),
                },
            );
        }
        Self::from_correlations(model, correlations, lambda, weighting)
    }
}

/// Identifier of one compressible group, e.g. `block3.vo`.
pub fn group_id(layer_id: &str, family: Family) -> String {
    format!("{layer_id}.{family}")
}

/// Per-head width for attention families, intermediate width for the FFN.
pub fn effective_width(block: &Block, family: Family) -> usize {
    match family {
        Family::Qk => block.qk.head_width(),
        Family::Vo => block.vo.head_width(),
        Family::Ffn => block.ffn.inner_dim(),
    }
}

/// Parameters added per unit of rank.
pub fn cost_slope(block: &Block, family: Family) -> f64 {
    let h = block.qk.heads.len();
    let v = match family {
        Family::Qk => h * (block.qk.query_dim() + block.qk.key_dim()),
        Family::Vo => h * (block.vo.input_dim() + block.vo.output_dim()),
        Family::Ffn => 2 * block.ffn.w_x.rows() + block.ffn.w_d.cols(),
    };
    v as f64
}

/// TRQ of a block family against its mixed correlations.
pub fn family_score(block: &Block, stats: &ModelStatistics, family: Family) -> Result<f64> {
    let l = &block.layer_id;
    let q = block.qk.full_query();
    let k = block.qk.full_key();
    let v = block.vo.full_value();
    match (family, block.attention) {
        (Family::Qk, AttentionKind::SelfAttention) => {
            calib::trq_score(&Matrix::hstack(&[q, k]), &stats.mixed(l, InputKind::SaInput)?.c_bar)
        }
        (Family::Qk, AttentionKind::Cross) => {
            let a = calib::trq_score(&q, &stats.mixed(l, InputKind::CaQueryInput)?.c_bar)?;
            let b = calib::trq_score(&k, &stats.mixed(l, InputKind::TextTokens)?.c_bar)?;
            Ok(0.5 * (a + b))
        }
        (Family::Vo, AttentionKind::SelfAttention) => calib::trq_score(&v, &stats.mixed(l, InputKind::SaInput)?.c_bar),
        (Family::Vo, AttentionKind::Cross) => calib::trq_score(&v, &stats.mixed(l, InputKind::TextTokens)?.c_bar),
        (Family::Ffn, _) => calib::trq_score(&block.ffn.w_d, &stats.mixed(l, InputKind::FfnIntermediate)?.c_bar),
    }
}

pub fn block_profiles(model: &ModelGraph, stats: &ModelStatistics) -> Result<Vec<BlockProfile>> {
    let mut out = Vec::with_capacity(3 * model.blocks.len());
    for b in &model.blocks {
        for f in Family::ALL {
            out.push(BlockProfile::new(
                group_id(&b.layer_id, f),
                f,
                family_score(b, stats, f)?,
                effective_width(b, f),
                cost_slope(b, f),
            ));
        }
    }
    Ok(out)
}

/// Allocation problem with default temperature, `r_min` and rounding.
pub fn allocation_problem(model: &ModelGraph, stats: &ModelStatistics, budget: f64) -> Result<AllocationProblem> {
    AllocationProblem::new(block_profiles(model, stats)?, budget)
}

/// Rank per group id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub ranks: BTreeMap<String, usize>,
}

impl CompressionPlan {
    pub fn from_allocation(plan: &AllocationPlan) -> Self {
        Self { ranks: plan.ranks() }
    }

    /// Every group at full width.
    pub fn full(model: &ModelGraph) -> Self {
        Self::uniform(model, 1.0)
    }

    /// Every group at `round(retention · d_eff)`, at least 1.
    pub fn uniform(model: &ModelGraph, retention: f64) -> Self {
        let mut ranks = BTreeMap::new();
        for b in &model.blocks {
            for f in Family::ALL {
                let d = effective_width(b, f);
                let r = ((retention * d as f64).round() as usize).clamp(1, d);
                ranks.insert(group_id(&b.layer_id, f), r);
            }
        }
        Self { ranks }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Parameter count of `model` compressed under this plan.
    pub fn param_count(&self, model: &ModelGraph) -> Result<usize> {
        let mut total = 0.0;
        for b in &model.blocks {
            for f in Family::ALL {
                total += cost_slope(b, f) * self.rank(b, f)? as f64;
            }
        }
        Ok(total as usize)
    }

    pub fn rank(&self, block: &Block, family: Family) -> Result<usize> {
        let id = group_id(&block.layer_id, family);
        let r = *self
            .ranks
            .get(&id)
            .ok_or_else(|| Error::PlanMismatch(format!("plan has no rank for {id}")))?;
        let d = effective_width(block, family);
        if r == 0 || r > d {
            return Err(Error::PlanMismatch(format!("rank {r} for {id} outside 1..={d}")));
        }
        Ok(r)
    }

    fn check_covers(&self, model: &ModelGraph) -> Result<()> {
        let known: BTreeSet<String> = model
            .blocks
            .iter()
            .flat_map(|b| Family::ALL.map(|f| group_id(&b.layer_id, f)))
            .collect();
        if let Some(extra) = self.ranks.keys().find(|k| !known.contains(*k)) {
            return Err(Error::PlanMismatch(format!("plan names unknown group {extra}")));
        }
        Ok(())
    }
}

/// Held-out data for the report.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    /// Taps from the original model.
    pub activations: Vec<ActivationRecord>,
    /// `(latents, text)` pairs for end-to-end comparison.
    pub probes: Vec<(Matrix, Matrix)>,
}

impl EvalSet {
    pub fn from_corpus(model: &ModelGraph, corpus: &ToyCorpus, prompts: &[usize]) -> Result<Self> {
        Ok(Self {
            activations: collect_activations(model, corpus, prompts)?,
            probes: probes_from_corpus(corpus, prompts),
        })
    }
}

pub fn probes_from_corpus(corpus: &ToyCorpus, prompts: &[usize]) -> Vec<(Matrix, Matrix)> {
    prompts
        .iter()
        .flat_map(|&p| (0..corpus.timesteps).map(move |t| (corpus.latents(p, t), corpus.text(p))))
        .collect()
}

pub fn probes_to_bundle(probes: &[(Matrix, Matrix)]) -> TensorBundle {
    let mut bundle = TensorBundle::new();
    for (i, (x, text)) in probes.iter().enumerate() {
        bundle.push(Tensor::from_matrix(format!("probe.{i:05}.x"), x)).expect("unique");
        bundle.push(Tensor::from_matrix(format!("probe.{i:05}.text"), text)).expect("unique");
    }
    bundle.metadata.insert("kind".into(), json!("probes"));
    bundle.metadata.insert("count".into(), json!(probes.len()));
    bundle
}

pub fn probes_from_bundle(bundle: &TensorBundle) -> Result<Vec<(Matrix, Matrix)>> {
    let n = bundle
        .metadata
        .get("count")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Manifest("probe bundle lacks 'count'".into()))? as usize;
    (0..n)
        .map(|i| {
            Ok((
                bundle.matrix(&format!("probe.{i:05}.x"))?,
                bundle.matrix(&format!("probe.{i:05}.text"))?,
            ))
        })
        .collect()
}

/// One compressed group in the report.
///
/// Measured losses are normalized per token so they are on the same scale as
/// the predictions, which come from per-token correlations: QK by
/// `N_q · N_k`, VO and FFN by `N`, token counts summed over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_id: String,
    pub layer_id: String,
    pub family: Family,
    pub rank: usize,
    pub d_eff: usize,
    /// Spectral tail (QK, VO) or Nyström residual `‖K − K̂‖_F` (FFN).
    pub predicted_error: f64,
    /// Upper bound on the normalized loss: the tail for QK/VO, the
    /// `‖W_D‖₂² ‖K⁻¹‖₂ E²` bound for the FFN.
    pub bound: f64,
    pub measured_loss: Option<f64>,
    pub params_original: usize,
    pub params_compressed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub plan_hash: String,
    pub groups: Vec<GroupReport>,
    pub params_original: usize,
    pub params_compressed: usize,
    pub probe_count: usize,
    pub output_max_abs_deviation: f64,
    /// `‖Y − Ŷ‖_F / ‖Y‖_F` over all probes.
    pub output_relative_deviation: f64,
}

impl CompressionReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "plan_hash {}", self.plan_hash);
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>6} {:>14} {:>14} {:>14} {:>10} {:>10}",
            "group", "rank", "d_eff", "predicted", "bound", "measured", "params", "orig"
        );
        for g in &self.groups {
            let measured = g.measured_loss.map_or("-".to_string(), |m| format!("{m:.6e}"));
            let _ = writeln!(
                out,
                "{:<16} {:>5} {:>6} {:>14.6e} {:>14.6e} {:>14} {:>10} {:>10}",
                g.group_id, g.rank, g.d_eff, g.predicted_error, g.bound, measured, g.params_compressed, g.params_original
            );
        }
        let _ = writeln!(out, "params {} / {}", self.params_compressed, self.params_original);
        let _ = writeln!(
            out,
            "output deviation over {} probes: max_abs {:.6e}, relative {:.6e}",
            self.probe_count, self.output_max_abs_deviation, self.output_relative_deviation
        );
        out
    }

    /// `key value` lines for scripting.
    pub fn to_metrics(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "plan_hash {}", self.plan_hash);
        let _ = writeln!(out, "params_original {}", self.params_original);
        let _ = writeln!(out, "params_compressed {}", self.params_compressed);
        let _ = writeln!(out, "probe_count {}", self.probe_count);
        let _ = writeln!(out, "output_max_abs_deviation {:e}", self.output_max_abs_deviation);
        let _ = writeln!(out, "output_relative_deviation {:e}", self.output_relative_deviation);
        for g in &self.groups {
            let id = &g.group_id;
            let _ = writeln!(out, "{id}.rank {}", g.rank);
            let _ = writeln!(out, "{id}.predicted_error {:e}", g.predicted_error);
            let _ = writeln!(out, "{id}.bound {:e}", g.bound);
            if let Some(m) = g.measured_loss {
                let _ = writeln!(out, "{id}.measured_loss {m:e}");
            }
            let _ = writeln!(out, "{id}.params {}", g.params_compressed);
        }
        out
    }
}

struct CompressedBlock {
    block: Block,
    reports: Vec<GroupReport>,
    ffn_selection: ColumnSelection,
}

fn compress_block(block: &Block, stats: &ModelStatistics, plan: &CompressionPlan) -> Result<CompressedBlock> {
    let l = &block.layer_id;
    let (c_q, c_kv) = match block.attention {
        AttentionKind::SelfAttention => {
            let c = stats.mixed(l, InputKind::SaInput)?;
            (c, c)
        }
        AttentionKind::Cross => (
            stats.mixed(l, InputKind::CaQueryInput)?,
            stats.mixed(l, InputKind::TextTokens)?,
        ),
    };
    let k_stats = &stats.mixed(l, InputKind::FfnIntermediate)?.c_bar;

    let r_qk = plan.rank(block, Family::Qk)?;
    let r_vo = plan.rank(block, Family::Vo)?;
    let k_ffn = plan.rank(block, Family::Ffn)?;
    let qk = madac::compress_qk(&block.qk, c_q, c_kv, r_qk)?;
    let vo = madac::compress_vo(&block.vo, c_kv, r_vo)?;
    let ffn = madac::compress_ffn(&block.ffn, k_stats, k_ffn)?;
    let selection = ffn.selection.clone().expect("FFN compression yields a selection");
    let ffn_bound = madac::ffn_error_bound(&block.ffn.w_d, k_stats, &selection)?;

    let entry = |family, rank, predicted, bound, orig, comp| GroupReport {
        group_id: group_id(l, family),
        layer_id: l.clone(),
        family,
        rank,
        d_eff: effective_width(block, family),
        predicted_error: predicted,
        bound,
        measured_loss: None,
        params_original: orig,
        params_compressed: comp,
    };
    let reports = vec![
        entry(Family::Qk, r_qk, qk.predicted_error, qk.predicted_error, block.qk.param_count(), qk.group.param_count()),
        entry(Family::Vo, r_vo, vo.predicted_error, vo.predicted_error, block.vo.param_count(), vo.group.param_count()),
        entry(Family::Ffn, k_ffn, ffn.predicted_error, ffn_bound, block.ffn.param_count(), ffn.group.param_count()),
    ];
    Ok(CompressedBlock {
        block: Block {
            layer_id: l.clone(),
            attention: block.attention,
            shape: block.shape,
            context_dim: block.context_dim,
            qk: qk.group,
            vo: vo.group,
            ffn: ffn.group,
        },
        reports,
        ffn_selection: selection,
    })
}

/// Normalized measured losses for one block, or `None` where the eval set
/// has no matching taps.
fn measure_block(
    original: &Block,
    compressed: &CompressedBlock,
    eval: &EvalSet,
) -> Result<[Option<f64>; 3]> {
    let l = &original.layer_id;
    let taps = |kind: InputKind| -> Vec<&ActivationRecord> {
        eval.activations.iter().filter(|r| &r.layer_id == l && r.kind == kind).collect()
    };
    let tokens = |rs: &[&ActivationRecord]| rs.iter().map(|r| r.data.rows()).sum::<usize>() as f64;
    let c = &compressed.block;

    let (qk, vo) = match original.attention {
        AttentionKind::SelfAttention => {
            let xs: Vec<Matrix> = taps(InputKind::SaInput).into_iter().map(|r| r.data.clone()).collect();
            if xs.is_empty() {
                (None, None)
            } else {
                let n = xs.iter().map(Matrix::rows).sum::<usize>() as f64;
                let qk = madac::qk_loss(&original.qk, &c.qk, &xs, None)? / (n * n);
                let vo = madac::vo_loss(&original.vo, &c.vo, &xs)? / n;
                (Some(qk), Some(vo))
            }
        }
        AttentionKind::Cross => {
            let text = taps(InputKind::TextTokens);
            let text_of: BTreeMap<&str, &Matrix> = text.iter().map(|r| (r.prompt_id.as_str(), &r.data)).collect();
            let queries = taps(InputKind::CaQueryInput);
            let paired: Vec<(&Matrix, &Matrix)> = queries
                .iter()
                .filter_map(|q| text_of.get(q.prompt_id.as_str()).map(|t| (&q.data, *t)))
                .collect();
            let qk = if paired.is_empty() {
                None
            } else {
                let xs: Vec<Matrix> = paired.iter().map(|(x, _)| (*x).clone()).collect();
                let ys: Vec<Matrix> = paired.iter().map(|(_, y)| (*y).clone()).collect();
                let n_q = tokens(&queries.iter().copied().filter(|q| text_of.contains_key(q.prompt_id.as_str())).collect::<Vec<_>>());
                let n_k = tokens(&text);
                Some(madac::qk_loss(&original.qk, &c.qk, &xs, Some(&ys))? / (n_q * n_k))
            };
            let vo = if text.is_empty() {
                None
            } else {
                let ys: Vec<Matrix> = text.iter().map(|r| r.data.clone()).collect();
                Some(madac::vo_loss(&original.vo, &c.vo, &ys)? / tokens(&text))
            };
            (qk, vo)
        }
    };

    let zs = taps(InputKind::FfnIntermediate);
    let ffn = if zs.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for r in &zs {
            let full = r.data.matmul(&original.ffn.w_d);
            let reduced = compressed.ffn_selection.apply(&r.data).matmul(&c.ffn.w_d);
            total += full.sub(&reduced).frobenius_norm_sq();
        }
        Some(total / tokens(&zs))
    };
    Ok([qk, vo, ffn])
}

/// Compresses every block under `plan`. The source model is not modified.
pub fn compress_model(
    model: &ModelGraph,
    stats: &ModelStatistics,
    plan: &CompressionPlan,
    eval: &EvalSet,
) -> Result<(ModelGraph, CompressionReport)> {
    plan.check_covers(model)?;
    let results = par_map(&model.blocks, |b| -> Result<CompressedBlock> {
        let mut cb = compress_block(b, stats, plan)?;
        let measured = measure_block(b, &cb, eval)?;
        for (r, m) in cb.reports.iter_mut().zip(measured) {
            r.measured_loss = m;
        }
        Ok(cb)
    });
    let mut blocks = Vec::with_capacity(results.len());
    let mut groups = Vec::new();
    for r in results {
        let cb = r?;
        groups.extend(cb.reports);
        blocks.push(cb.block);
    }
    let compressed = ModelGraph::new(blocks)?;

    let outputs = par_map(&eval.probes, |(x, text)| -> Result<(Matrix, Matrix)> {
        Ok((model.forward(x, text)?, compressed.forward(x, text)?))
    });
    let (mut max_abs, mut diff_sq, mut ref_sq) = (0.0_f64, 0.0, 0.0);
    for o in outputs {
        let (y, y_hat) = o?;
        max_abs = max_abs.max(y.max_abs_diff(&y_hat));
        diff_sq += y.sub(&y_hat).frobenius_norm_sq();
        ref_sq += y.frobenius_norm_sq();
    }
    let report = CompressionReport {
        plan_hash: plan.hash(),
        params_original: groups.iter().map(|g| g.params_original).sum(),
        params_compressed: groups.iter().map(|g| g.params_compressed).sum(),
        groups,
        probe_count: eval.probes.len(),
        output_max_abs_deviation: max_abs,
        output_relative_deviation: if ref_sq > 0.0 { (diff_sq / ref_sq).sqrt() } else { diff_sq.sqrt() },
    };
    Ok((compressed, report))
}

/// Model bundle of a compressed network with per-tensor `achieved_rank`,
/// `family` and `plan_hash` metadata.
pub fn checkpoint_bundle(compressed: &ModelGraph, plan: &CompressionPlan) -> Result<TensorBundle> {
    let hash = plan.hash();
    let base = compressed.to_bundle();
    let mut out = TensorBundle::new();
    out.metadata = base.metadata.clone();
    out.metadata.insert("kind".into(), json!("checkpoint"));
    out.metadata.insert("plan_hash".into(), json!(hash));
    for t in base.tensors() {
        let (layer, part) = t
            .name
            .split_once('.')
            .ok_or_else(|| Error::Manifest(format!("unexpected tensor name {}", t.name)))?;
        let family = if part.starts_with("attn.q") || part.starts_with("attn.k") {
            Family::Qk
        } else if part.starts_with("attn.") {
            Family::Vo
        } else {
            Family::Ffn
        };
        let block = compressed
            .block(layer)
            .ok_or_else(|| Error::Manifest(format!("no block {layer}")))?;
        let rank = plan.rank(block, family).unwrap_or_else(|_| effective_width(block, family));
        out.push(
            t.clone()
                .with_meta("achieved_rank", rank)
                .with_meta("family", family.as_str())
                .with_meta("plan_hash", hash.as_str()),
        )?;
    }
    Ok(out)
}
