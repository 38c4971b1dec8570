use std::collections::BTreeSet;
use std::path::Path;

use slimkit::alloc::{self, AllocationProblem};
use slimkit::calib::Weighting;
use slimkit::model::bundle::TensorBundle;
use slimkit::model::pipeline::{
    self, accumulate, activations_from_bundle, activations_to_bundle, checkpoint_bundle, collect_activations,
    compress_model, probes_from_bundle, probes_from_corpus, probes_to_bundle, CompressionPlan, CompressionReport,
    EvalSet, ModelStatistics,
};
use slimkit::model::toy::{make_toy_model, ToyCorpus};
use slimkit::model::ModelGraph;
use slimkit::slimset::{self, Coreset, CoresetConfig, EmbeddingPool};
use slimkit::verify::{self, VerifyConfig};

use crate::failure::{read_json, write_json, write_text, CliResult, Failure};
use crate::{AllocateArgs, AllocationArgs, CalibrateArgs, CompressArgs, ReportArgs, SlimsetArgs, ToyArgs, VerifyArgs};

fn load_bundle(path: &Path) -> CliResult<TensorBundle> {
    TensorBundle::load(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<ModelGraph> {
    Ok(ModelGraph::from_bundle(&load_bundle(path)?)?)
}

fn save_bundle(bundle: &TensorBundle, path: &Path) -> CliResult {
    bundle.save(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// `0.73x` is a fraction of `total`; anything else is an absolute count.
fn parse_budget(text: &str, total: usize) -> CliResult<f64> {
    let bad = || Failure::config(format!("budget must be a positive number or a fraction like 0.73x, got '{text}'"));
    let value = match text.strip_suffix('x') {
        Some(ratio) => ratio.parse::<f64>().map_err(|_| bad())? * total as f64,
        None => text.parse::<f64>().map_err(|_| bad())?,
    };
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(bad())
    }
}

fn configure(mut p: AllocationProblem, a: &AllocationArgs) -> CliResult<AllocationProblem> {
    if let Some(eps) = a.epsilon {
        p.epsilon = eps;
    }
    p.r_min = a.r_min;
    p.multiple = a.multiple;
    p.validate()?;
    Ok(p)
}

fn allocate_plan(
    model: &ModelGraph,
    stats: &ModelStatistics,
    budget: &str,
    a: &AllocationArgs,
) -> CliResult<(CompressionPlan, String)> {
    let budget = parse_budget(budget, model.param_count())?;
    let problem = configure(pipeline::allocation_problem(model, stats, budget)?, a)?;
    let plan = alloc::bisect_budget(&problem)?;
    Ok((CompressionPlan::from_allocation(&plan), plan.to_table()))
}

pub fn slimset(a: &SlimsetArgs) -> CliResult {
    let pool = EmbeddingPool::from_bundle(&load_bundle(&a.embeddings)?)?;
    let config = CoresetConfig {
        dedup_threshold: a.dedup,
        median_tol: a.median_tol,
        median_max_iter: a.median_max_iter,
        ..CoresetConfig::new(a.size, a.bins)
    };
    let core = slimset::build_coreset(&pool, &config)?;
    write_json(&a.out, &core)?;
    println!(
        "selected {} of {} prompts ({} bins, median {} after {} iterations)",
        core.selected_ids.len(),
        pool.len(),
        a.bins,
        if core.median_converged { "converged" } else { "not converged" },
        core.median_iterations
    );
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> CliResult {
    let weighting: Weighting = a.weighting.parse().map_err(|e: slimkit::Error| Failure::config(e.to_string()))?;
    let model = load_model(&a.model)?;
    let mut records = activations_from_bundle(&load_bundle(&a.activations)?)?;
    if let Some(path) = &a.coreset {
        let core: Coreset = read_json(path)?;
        let keep: BTreeSet<&str> = core.selected_ids.iter().map(String::as_str).collect();
        records.retain(|r| keep.contains(r.prompt_id.as_str()));
        if records.is_empty() {
            return Err(Failure::data(format!("no activations belong to the prompts in {}", path.display())));
        }
    }
    let stats = ModelStatistics::build(&model, &accumulate(&records)?, a.lambda, weighting)?;
    save_bundle(&stats.to_bundle(), &a.out)?;
    let table = stats.score_table();
    write_text(&a.out.join("scores.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn allocate(a: &AllocateArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let stats = ModelStatistics::from_bundle(&load_bundle(&a.stats)?, &model)?;
    let (plan, table) = allocate_plan(&model, &stats, &a.budget, &a.alloc)?;
    write_json(&a.out, &plan)?;
    if let Some(path) = &a.table {
        write_text(path, &table)?;
    }
    print!("{table}");
    println!("plan_hash {}", plan.hash());
    Ok(())
}

pub fn compress(a: &CompressArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let stats = ModelStatistics::from_bundle(&load_bundle(&a.stats)?, &model)?;
    let plan = match (&a.plan, &a.budget) {
        (Some(path), _) => read_json::<CompressionPlan>(path)?,
        (None, Some(budget)) => allocate_plan(&model, &stats, budget, &a.alloc)?.0,
        (None, None) => return Err(Failure::config("either --budget or --plan is required")),
    };
    let mut eval = EvalSet::default();
    if let Some(path) = &a.eval {
        eval.activations = activations_from_bundle(&load_bundle(path)?)?;
    }
    if let Some(path) = &a.probes {
        eval.probes = probes_from_bundle(&load_bundle(path)?)?;
    }
    let (compressed, report) = compress_model(&model, &stats, &plan, &eval)?;
    save_bundle(&checkpoint_bundle(&compressed, &plan)?, &a.out.join("checkpoint"))?;
    write_json(&a.out.join("plan.json"), &plan)?;
    write_json(&a.out.join("report.json"), &report)?;
    let text = report.to_text();
    write_text(&a.out.join("report.txt"), &text)?;
    write_text(&a.out.join("metrics.txt"), &report.to_metrics())?;
    print!("{text}");
    Ok(())
}

pub fn report(a: &ReportArgs) -> CliResult {
    let report: CompressionReport = read_json(&a.report)?;
    if a.metrics {
        print!("{}", report.to_metrics());
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

pub fn verify(a: &VerifyArgs, seed: u64) -> CliResult {
    if a.seeds == 0 {
        return Err(Failure::config("--seeds must be positive"));
    }
    let config = VerifyConfig {
        seed,
        instances: a.seeds,
        break_whitening: a.break_whitening,
    };
    let mut failed = Vec::new();
    for suite in verify::run(&config) {
        match suite.failures.first() {
            None => println!("PASS {} ({} instances)", suite.name, suite.instances),
            Some(first) => {
                println!(
                    "FAIL {} ({}/{} instances; first failing seed {}: {})",
                    suite.name,
                    suite.failures.len(),
                    suite.instances,
                    first.instance_seed,
                    first.detail
                );
                failed.push(suite.name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::violation(format!("violations in {}", failed.join(", "))))
    }
}

pub fn toy(a: &ToyArgs, seed: u64) -> CliResult {
    if a.prompts == 0 {
        return Err(Failure::config("--prompts must be positive"));
    }
    let model = make_toy_model(seed, a.blocks, a.d_model, a.heads, a.ffn_inner)?;
    let corpus = ToyCorpus::new(seed, a.d_model, a.prompts + a.eval_prompts, a.tokens, a.text_tokens, a.timesteps)?;
    let calib: Vec<usize> = (0..a.prompts).collect();
    let held_out: Vec<usize> = (a.prompts..a.prompts + a.eval_prompts).collect();

    save_bundle(&model.to_bundle(), &a.out.join("model"))?;
    let ids = calib.iter().map(|&p| corpus.prompt_ids[p].clone()).collect();
    let pool = EmbeddingPool::new(corpus.embeddings.select_rows(&calib), ids)?;
    save_bundle(&pool.to_bundle(), &a.out.join("embeddings"))?;
    let records = collect_activations(&model, &corpus, &calib)?;
    save_bundle(&activations_to_bundle(&records), &a.out.join("activations"))?;
    if !held_out.is_empty() {
        let eval = collect_activations(&model, &corpus, &held_out)?;
        save_bundle(&activations_to_bundle(&eval), &a.out.join("eval"))?;
        save_bundle(&probes_to_bundle(&probes_from_corpus(&corpus, &held_out)), &a.out.join("probes"))?;
    }
    println!(
        "toy model: {} blocks, d={}, heads={}, ffn={}, {} params; {} calibration and {} held-out prompts, {} timesteps",
        a.blocks,
        a.d_model,
        a.heads,
        a.ffn_inner,
        model.param_count(),
        a.prompts,
        a.eval_prompts,
        a.timesteps
    );
    Ok(())
}
