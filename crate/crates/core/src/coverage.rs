//! Neuron path coverage of a test suite against a decision graph.
//!
//! A cell is `(class, cluster, layer, bucket)`. SNPC buckets the Jaccard
//! similarity between an input's critical path and every abstract path of
//! its predicted class. ANPC buckets the activation distance, restricted to
//! the abstract path, between the input and the most similar member of each
//! cluster.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::abstraction::{encode, restrict, DecisionGraph, PathVector};
use crate::bitset::BitSet;
use crate::cdp::{intersection_union, Analysis, CriticalPath, PathExtractor};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use crate::cdp::layer_jaccard;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageConfig {
    /// `m`: buckets per `(class, cluster, layer)`.
    pub buckets: usize,
    /// `U`: distance at which ANPC buckets saturate.
    pub upper: f64,
}

impl CoverageConfig {
    pub fn new(buckets: usize, upper: f64) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::InvalidParameter(
                "bucket count must be at least 1".into(),
            ));
        }
        if !(upper > 0.0 && upper.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "upper bound must be positive, got {upper}"
            )));
        }
        Ok(CoverageConfig { buckets, upper })
    }
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            buckets: 200,
            upper: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Snpc,
    Anpc,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::Snpc => "snpc",
            Criterion::Anpc => "anpc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub class: usize,
    pub cluster: usize,
    pub layer: usize,
    /// `1..=m`.
    pub bucket: usize,
}

/// Bucket `i` with `J ∈ ((i-1)/m, i/m]` for `J = inter/union`, computed
/// exactly; `J = 0` lands in bucket 1 and two empty sets (`J = 1`) in `m`.
pub fn similarity_bucket(inter: usize, union: usize, m: usize) -> usize {
    if union == 0 {
        return m;
    }
    let (i, u, m) = (inter as u128, union as u128, m as u128);
    (i * m).div_ceil(u).max(1) as usize
}

/// Bucket `i` with `D ∈ (U(i-1)/m, U·i/m]`; `D = 0` lands in bucket 1 and
/// `D > U` is clamped to `m` (second value true).
pub fn distance_bucket(d: f64, upper: f64, m: usize) -> (usize, bool) {
    if d > upper {
        return (m, true);
    }
    let edge = |i: usize| upper * i as f64 / m as f64;
    let mut i = libm::ceil(d / upper * m as f64).clamp(1.0, m as f64) as usize;
    while i > 1 && d <= edge(i - 1) {
        i -= 1;
    }
    while i < m && d > edge(i) {
        i += 1;
    }
    (i, false)
}

/// The cells one input covers, computed without touching any state.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCells {
    pub class: usize,
    pub cells: Vec<Cell>,
    /// Distances above the bound that were clamped into the top bucket.
    pub clamped: usize,
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    libm::sqrt(
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum(),
    )
}

/// SNPC cells of a critical path predicted as `class`. Clusters without
/// members contribute nothing.
pub fn snpc_cells(graph: &DecisionGraph, class: usize, path: &CriticalPath, m: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for c in graph.classes[class].iter().filter(|c| !c.is_empty()) {
        for (layer, abstract_layer) in c.abstract_path.layers.iter().enumerate() {
            let units: Vec<usize> = abstract_layer.iter().map(|&(u, _)| u).collect();
            let (inter, union) = intersection_union(&path.layers[layer], &units);
            cells.push(Cell {
                class,
                cluster: c.cluster,
                layer,
                bucket: similarity_bucket(inter, union, m),
            });
        }
    }
    cells
}

/// Index of the member whose path is most similar to `query`; ties go to
/// the earlier member. `None` for an empty cluster.
pub fn nearest_member(
    graph: &DecisionGraph,
    class: usize,
    cluster: usize,
    query: &PathVector,
) -> Option<usize> {
    let c = &graph.classes[class][cluster];
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in c.member_paths.iter().enumerate() {
        let s = query.similarity(p);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// ANPC cells of an analysed input predicted as `class`.
pub fn anpc_cells(
    model: &Model,
    graph: &DecisionGraph,
    analysis: &Analysis,
    config: &CoverageConfig,
) -> Result<InputCells> {
    let class = analysis.trace.predicted;
    let query = encode(&analysis.path, model)?;
    let mut cells = Vec::new();
    let mut clamped = 0;
    for c in &graph.classes[class] {
        let Some(nearest) = nearest_member(graph, class, c.cluster, &query) else {
            continue;
        };
        let own = restrict(&analysis.trace.layers, &c.abstract_path);
        let theirs = &c.member_acts[nearest];
        let offsets = c.act_offsets();
        for layer in 0..c.abstract_path.layers.len() {
            let range = offsets[layer]..offsets[layer + 1];
            let d = l2(&own[range.clone()], &theirs[range]);
            let (bucket, over) = distance_bucket(d, config.upper, config.buckets);
            clamped += usize::from(over);
            cells.push(Cell {
                class,
                cluster: c.cluster,
                layer,
                bucket,
            });
        }
    }
    Ok(InputCells {
        class,
        cells,
        clamped,
    })
}

/// Cells covered by one input under `criterion`.
pub fn input_cells(
    criterion: Criterion,
    config: &CoverageConfig,
    model: &Model,
    graph: &DecisionGraph,
    x: &Tensor,
) -> Result<InputCells> {
    let analysis = PathExtractor::new(graph.params.alpha)?.analyze(model, x)?;
    match criterion {
        Criterion::Snpc => {
            let class = analysis.trace.predicted;
            Ok(InputCells {
                class,
                cells: snpc_cells(graph, class, &analysis.path, config.buckets),
                clamped: 0,
            })
        }
        Criterion::Anpc => anpc_cells(model, graph, &analysis, config),
    }
}

/// Covered cells of one criterion. Merging two states is a set union, so
/// the result never depends on submission order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageState {
    pub criterion: Criterion,
    pub config: CoverageConfig,
    model_hash: u64,
    classes: usize,
    clusters: usize,
    layers: usize,
    covered: BitSet,
    clamped: usize,
    inputs: usize,
}

impl CoverageState {
    pub fn new(criterion: Criterion, config: CoverageConfig, graph: &DecisionGraph) -> Self {
        let (classes, clusters, layers) =
            (graph.class_count(), graph.params.k, graph.layer_count());
        CoverageState {
            criterion,
            config,
            model_hash: graph.model_hash,
            classes,
            clusters,
            layers,
            covered: BitSet::new(classes * clusters * layers * config.buckets),
            clamped: 0,
            inputs: 0,
        }
    }

    /// `n·k·|p̂|·m`.
    pub fn cells_total(&self) -> usize {
        self.covered.len()
    }

    pub fn cells_covered(&self) -> usize {
        self.covered.count_ones()
    }

    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn inputs_seen(&self) -> usize {
        self.inputs
    }

    pub fn covered_bits(&self) -> &BitSet {
        &self.covered
    }

    pub fn cell_index(&self, cell: Cell) -> usize {
        assert!(
            cell.class < self.classes && cell.cluster < self.clusters && cell.layer < self.layers
        );
        assert!((1..=self.config.buckets).contains(&cell.bucket));
        ((cell.class * self.clusters + cell.cluster) * self.layers + cell.layer)
            * self.config.buckets
            + cell.bucket
            - 1
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        let m = self.config.buckets;
        let bucket = index % m + 1;
        let rest = index / m;
        let layer = rest % self.layers;
        let rest = rest / self.layers;
        Cell {
            class: rest / self.clusters,
            cluster: rest % self.clusters,
            layer,
            bucket,
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.covered.iter_ones().map(|i| self.cell_at(i))
    }

    /// Adds one input's cells; returns the ones not covered before.
    pub fn absorb(&mut self, input: &InputCells) -> Vec<Cell> {
        self.inputs += 1;
        self.clamped += input.clamped;
        let mut fresh = Vec::new();
        for &cell in &input.cells {
            let index = self.cell_index(cell);
            if self.covered.insert(index) {
                fresh.push(cell);
            }
        }
        fresh
    }

    fn check(&self, model: &Model, graph: &DecisionGraph) -> Result<()> {
        graph.check_model(model)?;
        if graph.model_hash != self.model_hash {
            return Err(Error::ModelMismatch {
                expected: self.model_hash,
                found: graph.model_hash,
            });
        }
        Ok(())
    }

    /// Runs `x` through the model and records what it covers.
    pub fn update(
        &mut self,
        model: &Model,
        graph: &DecisionGraph,
        x: &Tensor,
    ) -> Result<Vec<Cell>> {
        self.check(model, graph)?;
        let cells = input_cells(self.criterion, &self.config, model, graph, x)?;
        Ok(self.absorb(&cells))
    }

    pub fn coverage(&self) -> f64 {
        if self.cells_total() == 0 {
            return 0.0;
        }
        self.cells_covered() as f64 / self.cells_total() as f64
    }

    /// Covered cells per class.
    pub fn per_class(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        for cell in self.cells() {
            out[cell.class] += 1;
        }
        out
    }

    pub fn merge(&mut self, other: &CoverageState) -> Result<()> {
        let same = self.criterion == other.criterion
            && self.config == other.config
            && self.model_hash == other.model_hash
            && self.covered.len() == other.covered.len();
        if !same {
            return Err(Error::InvalidParameter(
                "cannot merge coverage of different setups".into(),
            ));
        }
        self.covered.union_with(&other.covered);
        self.clamped += other.clamped;
        self.inputs += other.inputs;
        Ok(())
    }
}

/// SNPC update of `state` with one input.
pub fn snpc_update(
    state: &mut CoverageState,
    model: &Model,
    graph: &DecisionGraph,
    x: &Tensor,
) -> Result<Vec<Cell>> {
    if state.criterion != Criterion::Snpc {
        return Err(Error::InvalidParameter("state does not track SNPC".into()));
    }
    state.update(model, graph, x)
}

/// ANPC update of `state` with one input.
pub fn anpc_update(
    state: &mut CoverageState,
    model: &Model,
    graph: &DecisionGraph,
    x: &Tensor,
) -> Result<Vec<Cell>> {
    if state.criterion != Criterion::Anpc {
        return Err(Error::InvalidParameter("state does not track ANPC".into()));
    }
    state.update(model, graph, x)
}

/// Coverage of a whole suite.
pub fn suite_coverage(
    criterion: Criterion,
    config: CoverageConfig,
    model: &Model,
    graph: &DecisionGraph,
    suite: &[Tensor],
) -> Result<CoverageState> {
    let mut state = CoverageState::new(criterion, config, graph);
    for x in suite {
        state.update(model, graph, x)?;
    }
    Ok(state)
}
