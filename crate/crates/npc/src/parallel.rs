//! Per-sample work spread over a rayon pool. Results are collected in input
//! order, so every output is identical to the sequential computation.

use npc_core::abstraction::{
    class_clusters, sample_record, DecisionGraph, GraphParams, SampleRecord,
};
use npc_core::cdp::{
    sample_band_changes, sample_criticality, CriticalitySummary, PathExtractor, BANDS,
};
use npc_core::coverage::{input_cells, CoverageConfig, CoverageState, Criterion, InputCells};
use npc_core::trainkit::{pgd_attack, AttackOutcome, PgdConfig};
use npc_core::{ActivationTrace, Error, Model, Result, Tensor};
use rayon::prelude::*;

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "NPC_THREADS";

/// Installs the global pool, sized by `NPC_THREADS` when set. Later calls
/// are no-ops.
pub fn init_pool() -> std::result::Result<(), String> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                return Err(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            }
        },
        Err(_) => 0,
    };
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

pub fn traces(model: &Model, inputs: &[Tensor]) -> Result<Vec<ActivationTrace>> {
    inputs.par_iter().map(|x| model.forward(x, None)).collect()
}

pub fn predictions(model: &Model, inputs: &[Tensor]) -> Result<Vec<usize>> {
    inputs
        .par_iter()
        .map(|x| model.predict(x).map(|p| p.0))
        .collect()
}

pub fn sample_records(model: &Model, inputs: &[Tensor], alpha: f64) -> Result<Vec<SampleRecord>> {
    let extractor = PathExtractor::new(alpha)?;
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| sample_record(model, &extractor, i, x))
        .collect()
}

/// Decision graph built with samples and classes processed in parallel.
pub fn build_graph(
    model: &Model,
    inputs: &[Tensor],
    params: GraphParams,
    seed: u64,
) -> Result<DecisionGraph> {
    let params = GraphParams {
        input_neurons: model.input_neurons(),
        ..GraphParams::new(params.alpha, params.k, params.beta)?
    };
    if inputs.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let records = sample_records(model, inputs, params.alpha)?;
    let classes = (0..model.class_count())
        .into_par_iter()
        .map(|class| {
            let of_class: Vec<&SampleRecord> =
                records.iter().filter(|r| r.predicted == class).collect();
            class_clusters(model, class, &of_class, &params, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecisionGraph {
        model_hash: model.content_hash(),
        params,
        classes,
    })
}

pub fn suite_cells(
    criterion: Criterion,
    config: &CoverageConfig,
    model: &Model,
    graph: &DecisionGraph,
    suite: &[Tensor],
) -> Result<Vec<InputCells>> {
    graph.check_model(model)?;
    suite
        .par_iter()
        .map(|x| input_cells(criterion, config, model, graph, x))
        .collect()
}

pub fn suite_coverage(
    criterion: Criterion,
    config: CoverageConfig,
    model: &Model,
    graph: &DecisionGraph,
    suite: &[Tensor],
) -> Result<CoverageState> {
    let mut state = CoverageState::new(criterion, config, graph);
    for cells in suite_cells(criterion, &config, model, graph, suite)? {
        state.absorb(&cells);
    }
    Ok(state)
}

pub fn criticality(model: &Model, inputs: &[Tensor], alpha: f64) -> Result<CriticalitySummary> {
    let extractor = PathExtractor::new(alpha)?;
    let samples = inputs
        .par_iter()
        .map(|x| sample_criticality(model, x, &extractor))
        .collect::<Result<Vec<_>>>()?;
    CriticalitySummary::from_samples(&samples)
}

pub fn band_rates(model: &Model, inputs: &[Tensor], alpha: f64) -> Result<[f64; BANDS]> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let extractor = PathExtractor::new(alpha)?;
    let changes = inputs
        .par_iter()
        .map(|x| sample_band_changes(model, x, &extractor))
        .collect::<Result<Vec<_>>>()?;
    let mut rates = [0.0; BANDS];
    for c in &changes {
        for (r, &hit) in rates.iter_mut().zip(c) {
            *r += f64::from(u8::from(hit));
        }
    }
    Ok(rates.map(|r| r / inputs.len() as f64))
}

pub fn attacks(
    model: &Model,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &PgdConfig,
) -> Result<Vec<AttackOutcome>> {
    inputs
        .par_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &label))| pgd_attack(model, x, label, cfg, i as u64))
        .collect()
}
