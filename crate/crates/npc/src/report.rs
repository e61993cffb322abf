//! Machine-readable reports. Every report carries the method choices that
//! shape its numbers.

use std::io::Write;
use std::path::Path;

use npc_core::abstraction::DecisionGraph;
use npc_core::coverage::CoverageState;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct MethodNotes {
    pub lrp_rule: &'static str,
    pub bias_relevance: &'static str,
    pub conv_neuron: &'static str,
    pub input_layer_neurons: bool,
    pub cdp_budget: &'static str,
}

impl MethodNotes {
    pub fn new(input_layer_neurons: bool) -> Self {
        MethodNotes {
            lrp_rule: "epsilon rule, eps = 1e-6, sign(0) = +1",
            bias_relevance: "absorbed by biases and dropped; the leak is reported per layer",
            conv_neuron: "one neuron per channel: activation = spatial mean, relevance = channel sum, masking zeroes the map",
            input_layer_neurons,
            cdp_budget: "alpha * logit; alpha * positive layer relevance when the logit is not positive",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphSummary {
    pub alpha: f64,
    pub k: usize,
    pub beta: f64,
    pub model_hash: String,
}

impl From<&DecisionGraph> for GraphSummary {
    fn from(g: &DecisionGraph) -> Self {
        GraphSummary {
            alpha: g.params.alpha,
            k: g.params.k,
            beta: g.params.beta,
            model_hash: crate::format::hash_hex(g.model_hash),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassCells {
    pub class: usize,
    pub cells_covered: usize,
    pub cells_total: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageNotes {
    pub bucket_rule: &'static str,
    pub distance: &'static str,
    pub empty_clusters: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub criterion: String,
    pub m: usize,
    pub u: Option<f64>,
    pub cells_covered: usize,
    pub cells_total: usize,
    pub ratio: f64,
    pub clamped_count: usize,
    pub per_class: Vec<ClassCells>,
    pub suite_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage_notes: Option<CoverageNotes>,
    pub method: MethodNotes,
}

impl CoverageReport {
    pub fn from_state(state: &CoverageState, graph: &DecisionGraph) -> Self {
        let per_class_total = state.cells_total() / graph.class_count().max(1);
        CoverageReport {
            criterion: state.criterion.name().into(),
            m: state.config.buckets,
            u: Some(state.config.upper),
            cells_covered: state.cells_covered(),
            cells_total: state.cells_total(),
            ratio: state.coverage(),
            clamped_count: state.clamped_count(),
            per_class: state
                .per_class()
                .into_iter()
                .enumerate()
                .map(|(class, cells_covered)| ClassCells {
                    class,
                    cells_covered,
                    cells_total: per_class_total,
                })
                .collect(),
            suite_size: state.inputs_seen(),
            graph: Some(graph.into()),
            coverage_notes: Some(CoverageNotes {
                bucket_rule: "bucket i holds values in ((i-1)/m, i/m] of the range; 0 falls in bucket 1; distances above u clamp to bucket m and are counted",
                distance: "euclidean (L2) over the abstract-path activations",
                empty_clusters: "clusters without members contribute no cells",
            }),
            method: MethodNotes::new(graph.params.input_neurons),
        }
    }
}

/// Pretty JSON to `path`, or to stdout without one.
pub fn emit<T: Serialize>(report: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Rows as CSV with a header line.
pub fn emit_csv<T: Serialize>(rows: &[T], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
