//! Decision graphs: the critical paths of training samples, clustered per
//! predicted class and merged into weighted abstract paths.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::bitset::BitSet;
use crate::cdp::{check_alpha, intersection_union, CriticalPath, PathExtractor};
use crate::model::{Model, NeuronId, NeuronMask};
use crate::rng::{Rng, Stream};
use crate::trainkit::LabeledDataset;
use crate::{Error, Result};

/// A critical path as a bit per coverage neuron, layers then units ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathVector {
    bits: BitSet,
    /// Start bit of every layer plus the total length.
    offsets: Vec<usize>,
}

/// Start bit of each coverage layer, followed by the total neuron count.
pub fn layer_offsets(model: &Model) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(model.coverage_layer_count() + 1);
    let mut at = 0;
    offsets.push(0);
    for l in 0..model.coverage_layer_count() {
        at += model.neuron_count(l);
        offsets.push(at);
    }
    offsets
}

impl PathVector {
    pub fn from_bits(bits: BitSet, offsets: Vec<usize>) -> Result<Self> {
        if offsets.last() != Some(&bits.len()) {
            return Err(Error::InvalidParameter(format!(
                "path vector of {} bits does not match {} neurons",
                bits.len(),
                offsets.last().copied().unwrap_or(0)
            )));
        }
        Ok(PathVector { bits, offsets })
    }

    pub fn bits(&self) -> &BitSet {
        &self.bits
    }

    pub fn layer_count(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Selected units of one layer, ascending.
    pub fn layer_units(&self, layer: usize) -> Vec<usize> {
        let (start, end) = (self.offsets[layer], self.offsets[layer + 1]);
        (start..end)
            .filter(|&i| self.bits.contains(i))
            .map(|i| i - start)
            .collect()
    }

    /// Mean per-layer Jaccard similarity, empty-vs-empty counting as 1.
    pub fn similarity(&self, other: &PathVector) -> f64 {
        assert_eq!(
            self.offsets, other.offsets,
            "path vectors of different models"
        );
        let layers = self.layer_count();
        if layers == 0 {
            return 1.0;
        }
        let total: f64 = (0..layers)
            .map(|l| {
                let (mut inter, mut union) = (0usize, 0usize);
                for i in self.offsets[l]..self.offsets[l + 1] {
                    let (a, b) = (self.bits.contains(i), other.bits.contains(i));
                    inter += usize::from(a && b);
                    union += usize::from(a || b);
                }
                if union == 0 {
                    1.0
                } else {
                    inter as f64 / union as f64
                }
            })
            .sum();
        total / layers as f64
    }
}

pub fn encode(p: &CriticalPath, model: &Model) -> Result<PathVector> {
    let offsets = layer_offsets(model);
    if p.layers.len() != model.coverage_layer_count() {
        return Err(Error::InvalidParameter(format!(
            "path spans {} layers, model has {}",
            p.layers.len(),
            model.coverage_layer_count()
        )));
    }
    let mut bits = BitSet::new(offsets[offsets.len() - 1]);
    for (l, units) in p.layers.iter().enumerate() {
        for &u in units {
            if u >= model.neuron_count(l) {
                return Err(Error::InvalidNeuron { layer: l, unit: u });
            }
            bits.insert(offsets[l] + u);
        }
    }
    Ok(PathVector { bits, offsets })
}

pub fn decode(v: &PathVector) -> Vec<Vec<usize>> {
    (0..v.layer_count()).map(|l| v.layer_units(l)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Clusters left without members (only when there are fewer distinct
    /// vectors than clusters).
    pub empty_clusters: Vec<usize>,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means over 0/1 vectors under squared Euclidean distance with
/// k-means++ seeding drawn from the clustering stream of `seed`.
pub fn kmeans(vectors: &[PathVector], k: usize, seed: u64) -> Result<KMeansResult> {
    let bits: Vec<&BitSet> = vectors.iter().map(|v| &v.bits).collect();
    kmeans_bits(&bits, k, &mut Stream::Clustering.rng(seed))
}

pub(crate) fn kmeans_bits(vectors: &[&BitSet], k: usize, rng: &mut Rng) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if vectors.is_empty() {
        return Err(Error::EmptyInput("k-means input"));
    }
    let dims = vectors[0].len();
    let points: Vec<Vec<f64>> = vectors
        .iter()
        .map(|b| {
            let mut p = vec![0.0; dims];
            for i in b.iter_ones() {
                p[i] = 1.0;
            }
            p
        })
        .collect();
    let n = points.len();
    let active = k.min(n);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < active {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            while d2[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            (assignments[i], dist[i]) = nearest(p, &centroids);
        }
        let mut sizes = vec![0usize; active];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for c in 0..active {
            if sizes[c] > 0 {
                continue;
            }
            let donor = (0..n).filter(|&i| sizes[assignments[i]] > 1).fold(
                None,
                |best: Option<usize>, i| match best {
                    Some(b) if dist[b] >= dist[i] => Some(b),
                    _ => Some(i),
                },
            );
            if let Some(i) = donor {
                sizes[assignments[i]] -= 1;
                assignments[i] = c;
                dist[i] = 0.0;
                sizes[c] = 1;
            }
        }
        let mut next = vec![vec![0.0; dims]; active];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in next[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..active {
            if sizes[c] == 0 {
                continue;
            }
            for s in next[c].iter_mut() {
                *s /= sizes[c] as f64;
            }
            movement = movement.max(libm::sqrt(sq_dist(&next[c], &centroids[c])));
            centroids[c] = core::mem::take(&mut next[c]);
        }
        if movement < KMEANS_TOLERANCE {
            break;
        }
    }

    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    centroids.resize(k, vec![0.0; dims]);
    Ok(KMeansResult {
        assignments,
        centroids,
        iterations,
        empty_clusters: (0..k).filter(|&c| sizes[c] == 0).collect(),
    })
}

/// Per-layer `(unit, weight)` lists, units ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPath {
    pub layers: Vec<Vec<(usize, f64)>>,
}

/// Union of the members' layer sets, each unit weighted by the fraction of
/// members that contain it.
pub fn merge<'a>(members: impl IntoIterator<Item = &'a [Vec<usize>]>) -> Result<WeightedPath> {
    let mut counts: Vec<Vec<usize>> = Vec::new();
    let mut n = 0usize;
    for layers in members {
        if n == 0 {
            counts = layers
                .iter()
                .map(|s| vec![0; s.iter().max().map_or(0, |m| m + 1)])
                .collect();
        } else if layers.len() != counts.len() {
            return Err(Error::InvalidParameter(
                "merged paths span different layer counts".into(),
            ));
        }
        for (c, units) in counts.iter_mut().zip(layers) {
            for &u in units {
                if u >= c.len() {
                    c.resize(u + 1, 0);
                }
                c[u] += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("merge members"));
    }
    Ok(WeightedPath {
        layers: counts
            .into_iter()
            .map(|c| {
                c.into_iter()
                    .enumerate()
                    .filter(|&(_, k)| k > 0)
                    .map(|(u, k)| (u, k as f64 / n as f64))
                    .collect()
            })
            .collect(),
    })
}

/// A merged path after the `beta` filter; every weight is `> beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractPath {
    pub layers: Vec<Vec<(usize, f64)>>,
    pub beta: f64,
}

impl AbstractPath {
    pub fn layer_units(&self, layer: usize) -> Vec<usize> {
        self.layers[layer].iter().map(|&(u, _)| u).collect()
    }

    pub fn unit_sets(&self) -> Vec<Vec<usize>> {
        (0..self.layers.len())
            .map(|l| self.layer_units(l))
            .collect()
    }

    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// True when the filter removed every neuron.
    pub fn is_empty(&self) -> bool {
        self.neuron_count() == 0
    }

    pub fn width(&self, model: &Model) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers
            .iter()
            .enumerate()
            .map(|(l, s)| s.len() as f64 / model.neuron_count(l) as f64)
            .sum::<f64>()
            / self.layers.len() as f64
    }

    pub fn to_mask(&self) -> NeuronMask {
        NeuronMask::from_layer_sets(&self.unit_sets())
    }

    /// Every coverage neuron outside the abstract path.
    pub fn complement_mask(&self, model: &Model) -> NeuronMask {
        let inside = self.to_mask();
        NeuronMask::all(model)
            .iter()
            .filter(|id| !inside.contains(*id))
            .collect()
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "beta must lie in [0, 1), got {beta}"
        )))
    }
}

/// Keeps the neurons whose weight is strictly above `beta`.
pub fn filter_beta(raw: &WeightedPath, beta: f64) -> Result<AbstractPath> {
    check_beta(beta)?;
    Ok(AbstractPath {
        layers: raw
            .layers
            .iter()
            .map(|l| l.iter().copied().filter(|&(_, w)| w > beta).collect())
            .collect(),
        beta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub class: usize,
    pub cluster: usize,
    /// Training sample indices, ascending.
    pub members: Vec<usize>,
    pub member_paths: Vec<PathVector>,
    /// Per member, its activations at the abstract-path neurons, layer by
    /// layer in abstract-unit order.
    pub member_acts: Vec<Vec<f32>>,
    pub abstract_path: AbstractPath,
}

impl Cluster {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Start of each abstract layer inside a `member_acts` row.
    pub fn act_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.abstract_path.layers.len() + 1);
        let mut at = 0;
        out.push(0);
        for l in &self.abstract_path.layers {
            at += l.len();
            out.push(at);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub alpha: f64,
    pub k: usize,
    pub beta: f64,
    /// Whether the raw input counts as coverage layer 0.
    pub input_neurons: bool,
}

impl GraphParams {
    pub fn new(alpha: f64, k: usize, beta: f64) -> Result<Self> {
        check_alpha(alpha)?;
        check_beta(beta)?;
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok(GraphParams {
            alpha,
            k,
            beta,
            input_neurons: false,
        })
    }
}

/// `k` abstract paths per class, built from training data.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionGraph {
    pub model_hash: u64,
    pub params: GraphParams,
    /// `classes[c][j]` is cluster `j` of predicted class `c`.
    pub classes: Vec<Vec<Cluster>>,
}

impl DecisionGraph {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn layer_count(&self) -> usize {
        self.classes
            .iter()
            .flatten()
            .map(|c| c.abstract_path.layers.len())
            .next()
            .unwrap_or(0)
    }

    /// `(class, cluster)` of a training sample.
    pub fn cluster_of(&self, sample: usize) -> Option<(usize, usize)> {
        self.classes.iter().flatten().find_map(|c| {
            c.members
                .binary_search(&sample)
                .ok()
                .map(|_| (c.class, c.cluster))
        })
    }

    /// Classes that no training sample was predicted as.
    pub fn empty_classes(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.classes[c].iter().all(Cluster::is_empty))
            .collect()
    }

    /// Rejects a model other than the one the graph was built from.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.model_hash != model.content_hash() {
            return Err(Error::ModelMismatch {
                expected: self.model_hash,
                found: model.content_hash(),
            });
        }
        if self.params.input_neurons != model.input_neurons() {
            return Err(Error::InvalidParameter(format!(
                "graph built with input neurons {}, model set to {}",
                self.params.input_neurons,
                model.input_neurons()
            )));
        }
        if self.classes.len() != model.class_count() {
            return Err(Error::InvalidParameter(format!(
                "graph has {} classes, model {}",
                self.classes.len(),
                model.class_count()
            )));
        }
        Ok(())
    }
}

/// What graph building needs to know about one training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample: usize,
    pub predicted: usize,
    pub path: CriticalPath,
    pub activations: Vec<Vec<f32>>,
}

pub fn sample_record(
    model: &Model,
    extractor: &PathExtractor,
    sample: usize,
    x: &crate::Tensor,
) -> Result<SampleRecord> {
    let a = extractor.analyze(model, x)?;
    Ok(SampleRecord {
        sample,
        predicted: a.trace.predicted,
        path: a.path.with_sample(sample),
        activations: a.trace.layers,
    })
}

pub fn build_decision_graph(
    model: &Model,
    train: &LabeledDataset,
    alpha: f64,
    k: usize,
    beta: f64,
    seed: u64,
) -> Result<DecisionGraph> {
    let mut params = GraphParams::new(alpha, k, beta)?;
    params.input_neurons = model.input_neurons();
    let extractor = PathExtractor::new(alpha)?;
    let records = train
        .inputs()
        .iter()
        .enumerate()
        .map(|(i, x)| sample_record(model, &extractor, i, x))
        .collect::<Result<Vec<_>>>()?;
    graph_from_records(model, &records, params, seed)
}

/// Clusters and merges precomputed sample records, one class at a time.
/// Records must be in ascending sample order.
pub fn graph_from_records(
    model: &Model,
    records: &[SampleRecord],
    params: GraphParams,
    seed: u64,
) -> Result<DecisionGraph> {
    GraphParams::new(params.alpha, params.k, params.beta)?;
    if records.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let classes = (0..model.class_count())
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

/// The `k` clusters of one predicted class.
pub fn class_clusters(
    model: &Model,
    class: usize,
    records: &[&SampleRecord],
    params: &GraphParams,
    seed: u64,
) -> Result<Vec<Cluster>> {
    let layers = model.coverage_layer_count();
    let empty = |cluster| Cluster {
        class,
        cluster,
        members: Vec::new(),
        member_paths: Vec::new(),
        member_acts: Vec::new(),
        abstract_path: AbstractPath {
            layers: vec![Vec::new(); layers],
            beta: params.beta,
        },
    };
    if records.is_empty() {
        return Ok((0..params.k).map(empty).collect());
    }
    let vectors = records
        .iter()
        .map(|r| encode(&r.path, model))
        .collect::<Result<Vec<_>>>()?;
    let bits: Vec<&BitSet> = vectors.iter().map(|v| &v.bits).collect();
    let km = kmeans_bits(
        &bits,
        params.k,
        &mut Stream::Clustering.rng_indexed(seed, class as u64),
    )?;
    (0..params.k)
        .map(|cluster| {
            let idx: Vec<usize> = (0..records.len())
                .filter(|&i| km.assignments[i] == cluster)
                .collect();
            if idx.is_empty() {
                return Ok(empty(cluster));
            }
            let raw = merge(idx.iter().map(|&i| records[i].path.layers.as_slice()))?;
            let mut abstract_path = filter_beta(&raw, params.beta)?;
            abstract_path.layers.resize(layers, Vec::new());
            let member_acts = idx
                .iter()
                .map(|&i| restrict(&records[i].activations, &abstract_path))
                .collect();
            Ok(Cluster {
                class,
                cluster,
                members: idx.iter().map(|&i| records[i].sample).collect(),
                member_paths: idx.iter().map(|&i| vectors[i].clone()).collect(),
                member_acts,
                abstract_path,
            })
        })
        .collect()
}

/// Activations at the abstract-path neurons, layer by layer.
pub fn restrict(activations: &[Vec<f32>], path: &AbstractPath) -> Vec<f32> {
    path.layers
        .iter()
        .zip(activations)
        .flat_map(|(units, acts)| units.iter().map(move |&(u, _)| acts[u]))
        .collect()
}

/// Inconsistency rate of one cluster when the same mask is applied to all
/// of its members.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterRate {
    pub class: usize,
    pub cluster: usize,
    pub members: usize,
    pub changed: usize,
}

impl ClusterRate {
    /// `None` for a cluster without members.
    pub fn rate(&self) -> Option<f64> {
        (self.members > 0).then(|| self.changed as f64 / self.members as f64)
    }
}

/// Changed predictions over all members of all clusters.
pub fn pooled_rate(rates: &[ClusterRate]) -> Option<f64> {
    let members: usize = rates.iter().map(|r| r.members).sum();
    let changed: usize = rates.iter().map(|r| r.changed).sum();
    (members > 0).then(|| changed as f64 / members as f64)
}

/// Masks every cluster's abstract path (or its complement) on all of its
/// members and counts changed predictions.
pub fn abstract_mask_eval(
    model: &Model,
    graph: &DecisionGraph,
    train: &LabeledDataset,
    target: crate::cdp::MaskTarget,
) -> Result<Vec<ClusterRate>> {
    graph.check_model(model)?;
    graph
        .classes
        .iter()
        .flatten()
        .map(|c| {
            let mask = match target {
                crate::cdp::MaskTarget::Cdp => c.abstract_path.to_mask(),
                crate::cdp::MaskTarget::Ncdp => c.abstract_path.complement_mask(model),
            };
            let mut changed = 0;
            for &s in &c.members {
                let x = train.inputs().get(s).ok_or_else(|| {
                    Error::InvalidParameter(format!("graph member {s} is not in the data"))
                })?;
                if crate::cdp::prediction_changes(model, x, &mask)? {
                    changed += 1;
                }
            }
            Ok(ClusterRate {
                class: c.class,
                cluster: c.cluster,
                members: c.members.len(),
                changed,
            })
        })
        .collect()
}

/// Jaccard of a path layer against an abstract layer.
pub fn abstract_layer_jaccard(units: &[usize], abstract_layer: &[(usize, f64)]) -> (usize, usize) {
    let a: Vec<usize> = abstract_layer.iter().map(|&(u, _)| u).collect();
    intersection_union(units, &a)
}

/// The neuron ids of a weighted path.
pub fn neuron_ids(path: &AbstractPath) -> impl Iterator<Item = NeuronId> + '_ {
    path.layers
        .iter()
        .enumerate()
        .flat_map(|(l, units)| units.iter().map(move |&(u, _)| NeuronId::new(l, u)))
}
