//! Command-line surface. Every command reads its artifacts, runs one
//! pipeline step and writes files plus a JSON report.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use npc_core::abstraction::{abstract_mask_eval, pooled_rate, DecisionGraph, GraphParams};
use npc_core::cdp::MaskTarget;
use npc_core::comparators::{ActivationRanges, KmncState, NbcMode, NbcState, NcState};
use npc_core::coverage::{CoverageConfig, Criterion};
use npc_core::fixture::{build_fixture, FixtureConfig};
use npc_core::metrics::{
    error_sensitivity_suites, graph_samples, normalized_coverage_change, output_impartiality,
    pearson, similarity_stats, spearman, PathSample, SimilarityReport,
};
use npc_core::rng::Stream;
use npc_core::trainkit::PgdConfig;
use npc_core::{Model, Tensor};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::format::{self, TensorSet};
use crate::parallel;
use crate::report::{emit, emit_csv, ClassCells, CoverageReport, GraphSummary, MethodNotes};

#[derive(Debug, Parser)]
#[command(
    name = "npc",
    version,
    about = "Decision-path coverage for feed-forward classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a small classifier on synthetic data and write it with its datasets.
    TrainFixture(TrainFixtureArgs),
    /// Build a decision graph from training data.
    BuildDg(BuildDgArgs),
    /// Measure SNPC or ANPC of a test suite.
    Cover(CoverArgs),
    /// Inconsistency rates of masking critical paths or their complements.
    MaskEval(MaskEvalArgs),
    /// Sweep alpha (and optionally clusters and beta) and recommend a setting.
    Tune(TuneArgs),
    /// Neuron-level baseline coverage (NC, KMNC, NBC).
    Baseline(BaselineArgs),
    /// Generate PGD adversarial inputs.
    Attack(AttackArgs),
    /// Output impartiality of one or more suites.
    Impartiality(ImpartialityArgs),
    /// Mean critical-path similarity within and across classes and clusters.
    Similarity(SimilarityArgs),
    /// Coverage of suites seeded with increasing fractions of errors.
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetKind {
    Blobs,
}

/// Default alpha per subject model of the reference evaluation.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlphaPreset {
    MnistSadl1,
    CifarSadl2,
    CifarVgg16,
    SvhnAlexnet,
    ImagenetVgg16,
}

impl AlphaPreset {
    pub fn alpha(self) -> f64 {
        match self {
            AlphaPreset::MnistSadl1 => 0.8,
            AlphaPreset::CifarSadl2 => 0.7,
            AlphaPreset::CifarVgg16 => 0.9,
            AlphaPreset::SvhnAlexnet => 0.7,
            AlphaPreset::ImagenetVgg16 => 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CriterionArg {
    Snpc,
    Anpc,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Snpc => Criterion::Snpc,
            CriterionArg::Anpc => Criterion::Anpc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Nc,
    Kmnc,
    Nbc,
}

#[derive(Debug, Args)]
pub struct TrainFixtureArgs {
    /// Model file to write; datasets go next to it as `<stem>.train.npct` and `<stem>.test.npct`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "blobs")]
    pub dataset: DatasetKind,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub dims: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long)]
    pub seed: u64,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "16,16")]
    pub hidden: Vec<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ModelArg {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildDgArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Labelled or unlabelled training inputs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "preset")]
    pub alpha: Option<f64>,
    /// Take alpha from a named preset.
    #[arg(long, value_enum, conflicts_with = "alpha")]
    pub preset: Option<AlphaPreset>,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long)]
    pub beta: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Count the raw input as coverage layer 0.
    #[arg(long)]
    pub input_neurons: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoverArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub dg: PathBuf,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long, value_enum)]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 200)]
    pub buckets: usize,
    #[arg(long, default_value_t = 2.0)]
    pub ubound: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskEvalArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// Also mask each fifth of the relevance-ranked path separately.
    #[arg(long)]
    pub quintiles: bool,
    /// Also mask each cluster's abstract path on its members; `--data` must
    /// be the graph's training set.
    #[arg(long)]
    pub dg: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,1.0")]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', requires = "betas")]
    pub clusters: Vec<usize>,
    #[arg(long, value_delimiter = ',', requires = "clusters")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub width_cap: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-setting rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Profiling data for the KMNC and NBC ranges.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(value_enum)]
    pub criterion: BaselineKind,
    #[arg(long, default_value_t = 0.0)]
    pub threshold: f32,
    /// KMNC sections per neuron.
    #[arg(long, default_value_t = 1000)]
    pub sections: usize,
    /// Split each NBC corner into this many sections.
    #[arg(long)]
    pub nbc_sections: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Labelled inputs to perturb.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eps: f32,
    /// Step size; defaults to eps / 8.
    #[arg(long)]
    pub step: Option<f32>,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long)]
    pub seed: u64,
    /// Adversarial inputs with their original labels.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImpartialityArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// One or more suites.
    #[arg(long, required = true, num_args = 1..)]
    pub suite: Vec<PathBuf>,
    /// Pair every suite with its coverage and report correlations.
    #[arg(long, requires = "criterion")]
    pub dg: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long, default_value_t = 200)]
    pub buckets: usize,
    #[arg(long, default_value_t = 2.0)]
    pub ubound: f64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Inputs grouped by predicted class; ignored with `--dg`.
    #[arg(long, required_unless_present = "dg")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    /// Use the graph's members with their clusters.
    #[arg(long)]
    pub dg: Option<PathBuf>,
    /// Samples per class.
    #[arg(long, default_value_t = 100)]
    pub cap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub dg: PathBuf,
    /// Labelled test data; correctly classified samples form the base suite.
    #[arg(long)]
    pub data: PathBuf,
    /// Labelled error candidates (e.g. attack output); only misclassified
    /// ones are used. Defaults to the misclassified samples of `--data`.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.03,0.05,0.1")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Base suite size; defaults to every correctly classified sample.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, value_enum, default_value = "snpc")]
    pub criterion: CriterionArg,
    #[arg(long, default_value_t = 200)]
    pub buckets: usize,
    #[arg(long, default_value_t = 2.0)]
    pub ubound: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    parallel::init_pool().map_err(anyhow::Error::msg)?;
    match cli.command {
        Command::TrainFixture(a) => train_fixture(a),
        Command::BuildDg(a) => build_dg(a),
        Command::Cover(a) => cover(a),
        Command::MaskEval(a) => mask_eval(a),
        Command::Tune(a) => tune(a),
        Command::Baseline(a) => baseline(a),
        Command::Attack(a) => attack(a),
        Command::Impartiality(a) => impartiality(a),
        Command::Similarity(a) => similarity(a),
        Command::Sensitivity(a) => sensitivity(a),
    }
}

fn read_model(path: &Path) -> anyhow::Result<Model> {
    let bytes = format::read_file(path).with_context(|| format!("reading {}", path.display()))?;
    format::load_model(&bytes).with_context(|| format!("loading model {}", path.display()))
}

fn read_data(path: &Path) -> anyhow::Result<TensorSet> {
    let bytes = format::read_file(path).with_context(|| format!("reading {}", path.display()))?;
    format::load_dataset(&bytes).with_context(|| format!("loading dataset {}", path.display()))
}

fn read_labeled(path: &Path) -> anyhow::Result<(Vec<Tensor>, Vec<usize>)> {
    let set = read_data(path)?;
    let Some(labels) = set.labels else {
        bail!("{} carries no labels", path.display());
    };
    Ok((set.inputs, labels))
}

/// Loads a graph and switches the model to the graph's neuron layout.
fn read_graph(path: &Path, model: Model) -> anyhow::Result<(Model, DecisionGraph)> {
    let bytes = format::read_file(path).with_context(|| format!("reading {}", path.display()))?;
    let params = format::peek_graph_params(&bytes)
        .with_context(|| format!("loading graph {}", path.display()))?;
    let model = model.with_input_neurons(params.input_neurons);
    let graph = format::load_graph(&bytes, &model)
        .with_context(|| format!("loading graph {}", path.display()))?;
    Ok((model, graph))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize)]
struct TrainFixtureReport {
    model: PathBuf,
    train: PathBuf,
    test: PathBuf,
    content_hash: String,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn train_fixture(a: TrainFixtureArgs) -> anyhow::Result<()> {
    let DatasetKind::Blobs = a.dataset;
    let mut cfg = FixtureConfig::blobs(a.dims as usize, a.classes as usize, a.seed);
    cfg.hidden = a.hidden;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.train.learning_rate = lr;
    }
    let fx = build_fixture(&cfg)?;
    let shape = fx.model.input_shape().to_vec();
    let (train_path, test_path) = (
        sibling(&a.out, ".train.npct"),
        sibling(&a.out, ".test.npct"),
    );
    format::write_file(&a.out, &format::save_model(&fx.model))?;
    format::write_file(
        &train_path,
        &format::save_dataset(&TensorSet::labeled(&fx.train, &shape))?,
    )?;
    format::write_file(
        &test_path,
        &format::save_dataset(&TensorSet::labeled(&fx.test, &shape))?,
    )?;
    emit(
        &TrainFixtureReport {
            model: a.out,
            train: train_path,
            test: test_path,
            content_hash: format::hash_hex(fx.model.content_hash()),
            train_accuracy: fx.train_accuracy,
            test_accuracy: fx.test.accuracy(&fx.model)?,
        },
        None,
    )
}

#[derive(Serialize)]
struct ClusterSummary {
    class: usize,
    cluster: usize,
    members: usize,
    abstract_neurons: usize,
    abstract_width: f64,
}

#[derive(Serialize)]
struct BuildDgReport {
    out: PathBuf,
    graph: GraphSummary,
    input_neurons: bool,
    empty_classes: Vec<usize>,
    clusters: Vec<ClusterSummary>,
    clustering: &'static str,
    method: MethodNotes,
}

const CLUSTERING_NOTE: &str =
    "k-means on 0/1 path vectors, squared euclidean distance, k-means++ seeding, stop at centroid shift < 1e-6 or 100 iterations";

fn cluster_summaries(model: &Model, graph: &DecisionGraph) -> Vec<ClusterSummary> {
    graph
        .classes
        .iter()
        .flatten()
        .map(|c| ClusterSummary {
            class: c.class,
            cluster: c.cluster,
            members: c.members.len(),
            abstract_neurons: c.abstract_path.neuron_count(),
            abstract_width: c.abstract_path.width(model),
        })
        .collect()
}

fn build_dg(a: BuildDgArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model.model)?.with_input_neurons(a.input_neurons);
    let data = read_data(&a.data)?;
    let alpha = a
        .alpha
        .or(a.preset.map(AlphaPreset::alpha))
        .expect("clap requires alpha or preset");
    let params = GraphParams::new(alpha, a.clusters, a.beta)?;
    let graph = parallel::build_graph(&model, &data.inputs, params, a.seed)?;
    format::write_file(&a.out, &format::save_graph(&graph))?;
    emit(
        &BuildDgReport {
            out: a.out,
            graph: (&graph).into(),
            input_neurons: a.input_neurons,
            empty_classes: graph.empty_classes(),
            clusters: cluster_summaries(&model, &graph),
            clustering: CLUSTERING_NOTE,
            method: MethodNotes::new(a.input_neurons),
        },
        a.report.as_deref(),
    )
}

fn cover(a: CoverArgs) -> anyhow::Result<()> {
    let (model, graph) = read_graph(&a.dg, read_model(&a.model.model)?)?;
    let suite = read_data(&a.suite)?;
    let config = CoverageConfig::new(a.buckets, a.ubound)?;
    let state =
        parallel::suite_coverage(a.criterion.into(), config, &model, &graph, &suite.inputs)?;
    emit(
        &CoverageReport::from_state(&state, &graph),
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct AbstractRates {
    graph: GraphSummary,
    inc_cdp: Option<f64>,
    inc_ncdp: Option<f64>,
    clusters: Vec<AbstractClusterRate>,
}

#[derive(Serialize)]
struct AbstractClusterRate {
    class: usize,
    cluster: usize,
    members: usize,
    abstract_width: f64,
    inc_cdp: Option<f64>,
    inc_ncdp: Option<f64>,
}

#[derive(Serialize)]
struct MaskEvalReport {
    alpha: f64,
    samples: usize,
    width: f64,
    inc_cdp: f64,
    inc_ncdp: f64,
    fallback_budget_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    quintile_inc: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    abstract_paths: Option<AbstractRates>,
    method: MethodNotes,
}

fn abstract_rates(
    model: &Model,
    graph: &DecisionGraph,
    data: &TensorSet,
) -> anyhow::Result<AbstractRates> {
    let train = npc_core::trainkit::LabeledDataset::new(data.inputs.clone(), vec![0; data.len()])?;
    let cdp = abstract_mask_eval(model, graph, &train, MaskTarget::Cdp)?;
    let ncdp = abstract_mask_eval(model, graph, &train, MaskTarget::Ncdp)?;
    let clusters = graph
        .classes
        .iter()
        .flatten()
        .zip(cdp.iter().zip(&ncdp))
        .map(|(c, (r, n))| AbstractClusterRate {
            class: c.class,
            cluster: c.cluster,
            members: c.members.len(),
            abstract_width: c.abstract_path.width(model),
            inc_cdp: r.rate(),
            inc_ncdp: n.rate(),
        })
        .collect();
    Ok(AbstractRates {
        graph: graph.into(),
        inc_cdp: pooled_rate(&cdp),
        inc_ncdp: pooled_rate(&ncdp),
        clusters,
    })
}

fn mask_eval(a: MaskEvalArgs) -> anyhow::Result<()> {
    let mut model = read_model(&a.model.model)?;
    let data = read_data(&a.data)?;
    let abstract_paths = match &a.dg {
        Some(path) => {
            let (m, graph) = read_graph(path, model)?;
            model = m;
            Some(abstract_rates(&model, &graph, &data)?)
        }
        None => None,
    };
    let summary = parallel::criticality(&model, &data.inputs, a.alpha)?;
    let quintile_inc = if a.quintiles {
        Some(parallel::band_rates(&model, &data.inputs, a.alpha)?.to_vec())
    } else {
        None
    };
    emit(
        &MaskEvalReport {
            alpha: a.alpha,
            samples: summary.samples,
            width: summary.width,
            inc_cdp: summary.inc_cdp,
            inc_ncdp: summary.inc_ncdp,
            fallback_budget_samples: summary.fallback_budget,
            quintile_inc,
            abstract_paths,
            method: MethodNotes::new(model.input_neurons()),
        },
        a.report.as_deref(),
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneRow {
    pub alpha: f64,
    pub k: Option<usize>,
    pub beta: Option<f64>,
    pub width: f64,
    pub inc_cdp: f64,
    pub inc_ncdp: f64,
}

impl TuneRow {
    fn gap(&self) -> f64 {
        self.inc_cdp - self.inc_ncdp
    }
}

/// The row maximising `Inc.C - Inc.NC` among rows no wider than `cap`;
/// earlier rows win ties.
pub fn recommend(rows: &[TuneRow], cap: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.width <= cap && best.is_none_or(|b| r.gap() > rows[b].gap()) {
            best = Some(i);
        }
    }
    best
}

#[derive(Serialize)]
struct TuneReport {
    width_cap: f64,
    rule: &'static str,
    alpha_rows: Vec<TuneRow>,
    recommended_alpha: Option<f64>,
    graph_rows: Vec<TuneRow>,
    recommended_graph: Option<TuneRow>,
    method: MethodNotes,
}

fn tune(a: TuneArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model.model)?;
    let data = read_data(&a.data)?;
    let mut alpha_rows = Vec::with_capacity(a.alphas.len());
    for &alpha in &a.alphas {
        let s = parallel::criticality(&model, &data.inputs, alpha)?;
        alpha_rows.push(TuneRow {
            alpha,
            k: None,
            beta: None,
            width: s.width,
            inc_cdp: s.inc_cdp,
            inc_ncdp: s.inc_ncdp,
        });
    }
    let recommended_alpha = recommend(&alpha_rows, a.width_cap).map(|i| alpha_rows[i].alpha);
    let mut graph_rows = Vec::new();
    if let Some(alpha) = recommended_alpha.filter(|_| !a.clusters.is_empty()) {
        let train =
            npc_core::trainkit::LabeledDataset::new(data.inputs.clone(), vec![0; data.len()])?;
        for &k in &a.clusters {
            for &beta in &a.betas {
                let graph = parallel::build_graph(
                    &model,
                    &data.inputs,
                    GraphParams::new(alpha, k, beta)?,
                    a.seed,
                )?;
                let cdp = abstract_mask_eval(&model, &graph, &train, MaskTarget::Cdp)?;
                let ncdp = abstract_mask_eval(&model, &graph, &train, MaskTarget::Ncdp)?;
                let filled: Vec<_> = graph
                    .classes
                    .iter()
                    .flatten()
                    .filter(|c| !c.is_empty())
                    .collect();
                let members: usize = filled.iter().map(|c| c.members.len()).sum();
                let width = filled
                    .iter()
                    .map(|c| c.abstract_path.width(&model) * c.members.len() as f64)
                    .sum::<f64>()
                    / members.max(1) as f64;
                graph_rows.push(TuneRow {
                    alpha,
                    k: Some(k),
                    beta: Some(beta),
                    width,
                    inc_cdp: pooled_rate(&cdp).unwrap_or(0.0),
                    inc_ncdp: pooled_rate(&ncdp).unwrap_or(0.0),
                });
            }
        }
    }
    let recommended_graph = recommend(&graph_rows, a.width_cap).map(|i| graph_rows[i].clone());
    if let Some(csv) = &a.csv {
        let all: Vec<TuneRow> = alpha_rows.iter().chain(&graph_rows).cloned().collect();
        emit_csv(&all, csv)?;
    }
    emit(
        &TuneReport {
            width_cap: a.width_cap,
            rule: "maximise inc_cdp - inc_ncdp subject to width <= width_cap; ties keep the earlier setting",
            alpha_rows,
            recommended_alpha,
            graph_rows,
            recommended_graph,
            method: MethodNotes::new(model.input_neurons()),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct BaselineReport {
    criterion: &'static str,
    m: usize,
    u: Option<f64>,
    cells_covered: usize,
    cells_total: usize,
    ratio: f64,
    clamped_count: usize,
    per_class: Vec<ClassCells>,
    suite_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f32>,
    degenerate_ranges: usize,
    range_rule: &'static str,
    method: MethodNotes,
}

enum BaselineState {
    Nc(NcState),
    Kmnc(KmncState),
    Nbc(NbcState),
}

impl BaselineState {
    fn observe(&mut self, t: &npc_core::ActivationTrace) {
        match self {
            BaselineState::Nc(s) => s.observe(t),
            BaselineState::Kmnc(s) => s.observe(t),
            BaselineState::Nbc(s) => s.observe(t),
        }
    }

    fn counts(&self) -> (usize, usize) {
        let hit = match self {
            BaselineState::Nc(s) => s.hit(),
            BaselineState::Kmnc(s) => s.hit(),
            BaselineState::Nbc(s) => s.hit(),
        };
        (hit.count_ones(), hit.len())
    }
}

fn baseline(a: BaselineArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model.model)?;
    let suite = read_data(&a.suite)?;
    let traces = parallel::traces(&model, &suite.inputs)?;
    let ranges = match (a.criterion, &a.train) {
        (BaselineKind::Nc, _) => None,
        (_, Some(train)) => {
            let train_traces = parallel::traces(&model, &read_data(train)?.inputs)?;
            let (first, rest) = train_traces
                .split_first()
                .context("profiling data is empty")?;
            let mut r = ActivationRanges::from_trace(first);
            rest.iter().for_each(|t| r.observe(t));
            Some(r)
        }
        (_, None) => bail!("--train is required for kmnc and nbc"),
    };
    let classes = model.class_count();
    // One state for the whole suite plus one per predicted class.
    let mut states = Vec::with_capacity(classes + 1);
    for _ in 0..=classes {
        states.push(match a.criterion {
            BaselineKind::Nc => BaselineState::Nc(NcState::new(&model, a.threshold)),
            BaselineKind::Kmnc => {
                BaselineState::Kmnc(KmncState::new(ranges.clone().expect("ranges"), a.sections)?)
            }
            BaselineKind::Nbc => {
                let mode = a.nbc_sections.map_or(NbcMode::Corners, NbcMode::Sections);
                BaselineState::Nbc(NbcState::new(ranges.clone().expect("ranges"), mode)?)
            }
        });
    }
    for t in &traces {
        states[0].observe(t);
        states[1 + t.predicted].observe(t);
    }
    let (covered, total) = states[0].counts();
    let per_class = (0..classes)
        .map(|c| {
            let (cells_covered, cells_total) = states[1 + c].counts();
            ClassCells {
                class: c,
                cells_covered,
                cells_total,
            }
        })
        .collect();
    let (name, m) = match a.criterion {
        BaselineKind::Nc => ("nc", 1),
        BaselineKind::Kmnc => ("kmnc", a.sections),
        BaselineKind::Nbc => ("nbc", 2 * a.nbc_sections.unwrap_or(1)),
    };
    emit(
        &BaselineReport {
            criterion: name,
            m,
            u: None,
            cells_covered: covered,
            cells_total: total,
            ratio: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
            clamped_count: 0,
            per_class,
            suite_size: traces.len(),
            threshold: (a.criterion == BaselineKind::Nc).then_some(a.threshold),
            degenerate_ranges: ranges.as_ref().map_or(0, |r| r.degenerate().len()),
            range_rule: "a neuron whose profiled range is a single point has only its first section, hit by that exact value",
            method: MethodNotes::new(model.input_neurons()),
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct AttackReport {
    out: PathBuf,
    eps: f32,
    step: f32,
    iters: usize,
    samples: usize,
    fooled: usize,
    fooled_rate: f64,
    max_linf: f32,
}

fn attack(a: AttackArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model.model)?;
    let (inputs, labels) = read_labeled(&a.data)?;
    let mut cfg = PgdConfig::with_eps(a.eps, a.seed);
    cfg.iters = a.iters;
    if let Some(step) = a.step {
        cfg.step = step;
    }
    let outcomes = parallel::attacks(&model, &inputs, &labels, &cfg)?;
    let max_linf = outcomes
        .iter()
        .zip(&inputs)
        .map(|(o, x)| o.adversarial.max_abs_diff(x))
        .try_fold(0.0f32, |m, d| d.map(|d| m.max(d)))?;
    let fooled = outcomes.iter().filter(|o| o.fooled).count();
    let adversarial: Vec<Tensor> = outcomes.into_iter().map(|o| o.adversarial).collect();
    let set = TensorSet {
        sample_shape: model.input_shape().to_vec(),
        inputs: adversarial,
        labels: Some(labels),
    };
    format::write_file(&a.out, &format::save_dataset(&set)?)?;
    emit(
        &AttackReport {
            out: a.out,
            eps: cfg.eps,
            step: cfg.step,
            iters: cfg.iters,
            samples: inputs.len(),
            fooled,
            fooled_rate: if inputs.is_empty() {
                0.0
            } else {
                fooled as f64 / inputs.len() as f64
            },
            max_linf,
        },
        a.report.as_deref(),
    )
}

#[derive(Debug, Clone, Serialize)]
struct SuiteRow {
    suite: String,
    size: usize,
    impartiality: f64,
    coverage: Option<f64>,
}

#[derive(Serialize)]
struct ImpartialityReport {
    class_count: usize,
    normalization: &'static str,
    suites: Vec<SuiteRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    criterion: Option<&'static str>,
    pearson: Option<f64>,
    spearman: Option<f64>,
}

const IMPARTIALITY_NOTE: &str = "entropy of the predicted-class distribution divided by ln(class_count), so uniform predictions score 1 and single-class predictions 0; \
     dividing by (1/|C|)·ln(1/|C|) instead would give |C| for the uniform case";

fn impartiality(a: ImpartialityArgs) -> anyhow::Result<()> {
    let mut model = read_model(&a.model.model)?;
    let graph = match &a.dg {
        Some(path) => {
            let (m, g) = read_graph(path, model)?;
            model = m;
            Some(g)
        }
        None => None,
    };
    let config = CoverageConfig::new(a.buckets, a.ubound)?;
    let mut rows = Vec::with_capacity(a.suite.len());
    for path in &a.suite {
        let suite = read_data(path)?;
        let preds = parallel::predictions(&model, &suite.inputs)?;
        let coverage = match (&graph, a.criterion) {
            (Some(g), Some(c)) => Some(
                parallel::suite_coverage(c.into(), config, &model, g, &suite.inputs)?.coverage(),
            ),
            _ => None,
        };
        rows.push(SuiteRow {
            suite: path.display().to_string(),
            size: suite.len(),
            impartiality: output_impartiality(&preds, model.class_count())?,
            coverage,
        });
    }
    let covs: Vec<f64> = rows.iter().filter_map(|r| r.coverage).collect();
    let imps: Vec<f64> = rows.iter().map(|r| r.impartiality).collect();
    let paired = covs.len() == imps.len();
    if let Some(csv) = &a.csv {
        emit_csv(&rows, csv)?;
    }
    emit(
        &ImpartialityReport {
            class_count: model.class_count(),
            normalization: IMPARTIALITY_NOTE,
            criterion: a.criterion.map(|c| Criterion::from(c).name()),
            pearson: paired.then(|| pearson(&covs, &imps)).flatten(),
            spearman: paired.then(|| spearman(&covs, &imps)).flatten(),
            suites: rows,
        },
        a.report.as_deref(),
    )
}

#[derive(Serialize)]
struct SimilarityOut {
    source: &'static str,
    alpha: f64,
    cap: usize,
    #[serde(flatten)]
    stats: SimilarityJson,
}

#[derive(Serialize)]
struct SimilarityJson {
    intra_class: Option<f64>,
    inter_class: Option<f64>,
    intra_cluster: Option<f64>,
    inter_cluster: Option<f64>,
    pairs: [usize; 4],
    flags: Vec<String>,
}

impl From<SimilarityReport> for SimilarityJson {
    fn from(r: SimilarityReport) -> Self {
        SimilarityJson {
            intra_class: r.intra_class,
            inter_class: r.inter_class,
            intra_cluster: r.intra_cluster,
            inter_cluster: r.inter_cluster,
            pairs: r.pairs,
            flags: r.flags.iter().map(|f| format!("{f:?}")).collect(),
        }
    }
}

fn similarity(a: SimilarityArgs) -> anyhow::Result<()> {
    let model = read_model(&a.model.model)?;
    let (samples, alpha, source) = match (&a.dg, &a.data) {
        (Some(path), _) => {
            let (_, graph) = read_graph(path, model)?;
            let samples: Vec<PathSample> =
                graph_samples(&graph).into_iter().map(|(_, s)| s).collect();
            (samples, graph.params.alpha, "graph members")
        }
        (None, Some(data)) => {
            let data = read_data(data)?;
            let records = parallel::sample_records(&model, &data.inputs, a.alpha)?;
            let samples = records
                .into_iter()
                .map(|r| PathSample {
                    class: r.predicted,
                    cluster: None,
                    layers: r.path.layers,
                })
                .collect();
            (samples, a.alpha, "data by predicted class")
        }
        (None, None) => bail!("either --data or --dg is required"),
    };
    emit(
        &SimilarityOut {
            source,
            alpha,
            cap: a.cap,
            stats: similarity_stats(&samples, a.cap, a.seed).into(),
        },
        a.report.as_deref(),
    )
}

#[derive(Debug, Clone, Serialize)]
struct SensitivityRow {
    repeat: usize,
    fraction: f64,
    replaced: usize,
    coverage: f64,
    normalized_change: Option<f64>,
}

#[derive(Serialize)]
struct SensitivityReport {
    criterion: &'static str,
    base_size: usize,
    errors_available: usize,
    rows: Vec<SensitivityRow>,
    non_decreasing_repeats: usize,
    repeats: usize,
    graph: GraphSummary,
}

fn sensitivity(a: SensitivityArgs) -> anyhow::Result<()> {
    let (model, graph) = read_graph(&a.dg, read_model(&a.model.model)?)?;
    let (inputs, labels) = read_labeled(&a.data)?;
    let preds = parallel::predictions(&model, &inputs)?;
    let mut benign: Vec<usize> = (0..inputs.len())
        .filter(|&i| preds[i] == labels[i])
        .collect();
    let error_pool: Vec<Tensor> = match &a.errors {
        Some(path) => {
            let (xs, ls) = read_labeled(path)?;
            let ps = parallel::predictions(&model, &xs)?;
            xs.into_iter()
                .zip(ls.iter().zip(&ps))
                .filter(|(_, (l, p))| l != p)
                .map(|(x, _)| x)
                .collect()
        }
        None => (0..inputs.len())
            .filter(|&i| preds[i] != labels[i])
            .map(|i| inputs[i].clone())
            .collect(),
    };
    if let Some(size) = a.size {
        if size > benign.len() {
            bail!(
                "base suite of {size} requested but only {} samples are classified correctly",
                benign.len()
            );
        }
        benign.shuffle(&mut Stream::SuiteSampling.rng(a.seed));
        benign.truncate(size);
        benign.sort_unstable();
    }
    let base: Vec<Tensor> = benign.iter().map(|&i| inputs[i].clone()).collect();
    let suites = error_sensitivity_suites(&base, &error_pool, &a.fractions, a.repeats, a.seed)?;
    let config = CoverageConfig::new(a.buckets, a.ubound)?;
    let criterion: Criterion = a.criterion.into();
    let mut rows = Vec::with_capacity(suites.len());
    for s in &suites {
        let cov = parallel::suite_coverage(criterion, config, &model, &graph, &s.items)?.coverage();
        rows.push(SensitivityRow {
            repeat: s.repeat,
            fraction: s.fraction,
            replaced: s.replaced,
            coverage: cov,
            normalized_change: None,
        });
    }
    let baseline = parallel::suite_coverage(criterion, config, &model, &graph, &base)?.coverage();
    let mut non_decreasing = 0;
    for chunk in rows.chunks_mut(a.fractions.len().max(1)) {
        let covs: Vec<f64> = chunk.iter().map(|r| r.coverage).collect();
        if covs.windows(2).all(|w| w[1] >= w[0]) {
            non_decreasing += 1;
        }
        if let Ok(norm) = normalized_coverage_change(&covs, baseline) {
            for (r, n) in chunk.iter_mut().zip(norm) {
                r.normalized_change = Some(n);
            }
        }
    }
    if let Some(csv) = &a.csv {
        emit_csv(&rows, csv)?;
    }
    emit(
        &SensitivityReport {
            criterion: criterion.name(),
            base_size: base.len(),
            errors_available: error_pool.len(),
            rows,
            non_decreasing_repeats: non_decreasing,
            repeats: a.repeats,
            graph: (&graph).into(),
        },
        a.report.as_deref(),
    )
}
