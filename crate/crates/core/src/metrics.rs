//! Evaluation statistics: path similarity aggregates, output impartiality,
//! normalized coverage change, error-seeded suites and correlations.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;

use crate::abstraction::DecisionGraph;
use crate::cdp::layers_similarity;
use crate::rng::Stream;
use crate::{Error, Result};

/// One sample's path with its class and, for training samples, its cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub class: usize,
    pub cluster: Option<usize>,
    pub layers: Vec<Vec<usize>>,
}

/// The decoded member paths of a graph, labelled by class and cluster.
pub fn graph_samples(graph: &DecisionGraph) -> Vec<(usize, PathSample)> {
    let mut out: Vec<(usize, PathSample)> = graph
        .classes
        .iter()
        .flatten()
        .flat_map(|c| {
            c.members.iter().zip(&c.member_paths).map(move |(&s, p)| {
                (
                    s,
                    PathSample {
                        class: c.class,
                        cluster: Some(c.cluster),
                        layers: crate::abstraction::decode(p),
                    },
                )
            })
        })
        .collect();
    out.sort_by_key(|(s, _)| *s);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityFlag {
    /// Fewer than two classes have samples.
    SingleClass,
    /// No class has two samples.
    NoIntraClassPairs,
    /// No cluster has two samples, or no samples carry clusters.
    NoIntraClusterPairs,
    /// No class has samples in two clusters.
    NoInterClusterPairs,
}

/// Mean pairwise path similarity; a mean is `None` when it has no pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub intra_class: Option<f64>,
    pub inter_class: Option<f64>,
    pub intra_cluster: Option<f64>,
    pub inter_cluster: Option<f64>,
    /// Pair counts in the same order.
    pub pairs: [usize; 4],
    pub flags: Vec<SimilarityFlag>,
}

pub const DEFAULT_PAIR_CAP: usize = 100;

/// Averages over all distinct pairs: within a class, across classes, within
/// a cluster, and across clusters of the same class. Classes with more than
/// `cap` samples are subsampled with the pair-sampling stream of `seed`.
pub fn similarity_stats(samples: &[PathSample], cap: usize, seed: u64) -> SimilarityReport {
    let classes = samples.iter().map(|s| s.class + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.class].push(i);
    }
    let mut rng = Stream::PairSampling.rng(seed);
    let mut chosen = Vec::new();
    for members in &mut by_class {
        if members.len() > cap {
            members.shuffle(&mut rng);
            members.truncate(cap);
            members.sort_unstable();
        }
        chosen.extend_from_slice(members);
    }
    chosen.sort_unstable();

    let mut sums = [0.0f64; 4];
    let mut pairs = [0usize; 4];
    for (a, &i) in chosen.iter().enumerate() {
        for &j in &chosen[a + 1..] {
            let (p, q) = (&samples[i], &samples[j]);
            let s = layers_similarity(&p.layers, &q.layers);
            let slots: &[usize] = if p.class != q.class {
                &[1]
            } else {
                match (p.cluster, q.cluster) {
                    (Some(x), Some(y)) if x == y => &[0, 2],
                    (Some(_), Some(_)) => &[0, 3],
                    _ => &[0],
                }
            };
            for &slot in slots {
                sums[slot] += s;
                pairs[slot] += 1;
            }
        }
    }
    let mean = |k: usize| (pairs[k] > 0).then(|| sums[k] / pairs[k] as f64);
    let mut flags = Vec::new();
    if by_class.iter().filter(|m| !m.is_empty()).count() < 2 {
        flags.push(SimilarityFlag::SingleClass);
    }
    if pairs[0] == 0 {
        flags.push(SimilarityFlag::NoIntraClassPairs);
    }
    if pairs[2] == 0 {
        flags.push(SimilarityFlag::NoIntraClusterPairs);
    }
    if pairs[3] == 0 {
        flags.push(SimilarityFlag::NoInterClusterPairs);
    }
    SimilarityReport {
        intra_class: mean(0),
        inter_class: mean(1),
        intra_cluster: mean(2),
        inter_cluster: mean(3),
        pairs,
        flags,
    }
}

/// Entropy of the predicted-class distribution divided by `ln(class_count)`:
/// 1 for a uniform spread, 0 when every prediction is the same class.
///
/// Computed as `1 - KL(P || uniform) / ln C` so both extremes come out exact.
pub fn output_impartiality(predictions: &[usize], class_count: usize) -> Result<f64> {
    if class_count < 2 {
        return Err(Error::InvalidParameter(
            "impartiality needs at least 2 classes".into(),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("prediction list"));
    }
    let mut counts = vec![0usize; class_count];
    for &p in predictions {
        if p >= class_count {
            return Err(Error::InvalidLabel {
                label: p,
                class_count,
            });
        }
        counts[p] += 1;
    }
    let n = predictions.len();
    let kl: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 / n as f64 * libm::log((c * class_count) as f64 / n as f64))
        .sum();
    Ok((1.0 - kl / libm::log(class_count as f64)).clamp(0.0, 1.0))
}

/// `(Cov(s) - Cov(s0)) / (max Δ - min Δ)` for every suite, where the deltas
/// include the baseline's own zero.
pub fn normalized_coverage_change(coverages: &[f64], baseline: f64) -> Result<Vec<f64>> {
    if coverages.is_empty() {
        return Err(Error::EmptyInput("suite coverages"));
    }
    let deltas: Vec<f64> = coverages.iter().map(|c| c - baseline).collect();
    let max = deltas.iter().copied().fold(0.0, f64::max);
    let min = deltas.iter().copied().fold(0.0, f64::min);
    let range = max - min;
    if range == 0.0 || !range.is_finite() {
        return Err(Error::Degenerate("every suite has the baseline coverage"));
    }
    Ok(deltas.into_iter().map(|d| d / range).collect())
}

/// A base suite with a fraction of its entries replaced by errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSuite<T> {
    pub repeat: usize,
    pub fraction: f64,
    pub replaced: usize,
    /// Positions in the base suite that now hold errors.
    pub positions: Vec<usize>,
    pub items: Vec<T>,
}

/// For each repeat, draws one order of base positions and one order of
/// errors; a suite with fraction `f` replaces the first `round(f·n)`
/// positions with the first errors. Suites of one repeat are therefore
/// nested in their errors.
pub fn error_sensitivity_suites<T: Clone>(
    base: &[T],
    errors: &[T],
    fractions: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ErrorSuite<T>>> {
    if base.is_empty() {
        return Err(Error::EmptyInput("base suite"));
    }
    let counts = fractions
        .iter()
        .map(|&f| {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidParameter(alloc::format!(
                    "error fraction {f} outside [0, 1]"
                )));
            }
            Ok(libm::round(f * base.len() as f64) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    let needed = counts.iter().copied().max().unwrap_or(0);
    if needed > errors.len() {
        return Err(Error::InsufficientErrors {
            needed,
            available: errors.len(),
        });
    }
    let mut out = Vec::with_capacity(repeats * fractions.len());
    for repeat in 0..repeats {
        let mut rng = Stream::SuiteSampling.rng_indexed(seed, repeat as u64);
        let mut positions: Vec<usize> = (0..base.len()).collect();
        positions.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..errors.len()).collect();
        order.shuffle(&mut rng);
        for (&fraction, &count) in fractions.iter().zip(&counts) {
            let mut items = base.to_vec();
            for (&p, &e) in positions[..count].iter().zip(&order) {
                items[p] = errors[e].clone();
            }
            let mut replaced_at = positions[..count].to_vec();
            replaced_at.sort_unstable();
            out.push(ErrorSuite {
                repeat,
                fraction,
                replaced: count,
                positions: replaced_at,
                items,
            });
        }
    }
    Ok(out)
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / libm::sqrt(sxx * syy))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&ranks(x), &ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(class: usize, cluster: usize, layers: Vec<Vec<usize>>) -> PathSample {
        PathSample {
            class,
            cluster: Some(cluster),
            layers,
        }
    }

    #[test]
    fn impartiality_values() {
        let uniform: Vec<usize> = (0..10).cycle().take(100).collect();
        assert_eq!(output_impartiality(&uniform, 10).unwrap(), 1.0);
        assert_eq!(output_impartiality(&[3; 17], 10).unwrap(), 0.0);
        let h = -(2.0f64 / 3.0 * (2.0f64 / 3.0).ln() + 1.0 / 3.0 * (1.0f64 / 3.0).ln());
        let v = output_impartiality(&[0, 0, 1], 2).unwrap();
        assert!((v - h / 2.0f64.ln()).abs() < 1e-12);
        assert!((v - 0.9183).abs() < 1e-4);
        assert!(output_impartiality(&[0], 1).is_err());
        assert!(output_impartiality(&[], 2).is_err());
        assert!(output_impartiality(&[2], 2).is_err());
    }

    #[test]
    fn impartiality_invariances() {
        let p = [0, 1, 1, 2, 2, 2, 0, 1];
        let relabel: Vec<usize> = p.iter().map(|&c| (c + 1) % 3).collect();
        let mut rev = p;
        rev.reverse();
        let base = output_impartiality(&p, 3).unwrap();
        assert!((output_impartiality(&relabel, 3).unwrap() - base).abs() < 1e-15);
        assert!((output_impartiality(&rev, 3).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn coverage_change_cases() {
        let v = normalized_coverage_change(&[0.2, 0.7, 1.2], 0.2).unwrap();
        assert!(v
            .iter()
            .zip([0.0, 0.5, 1.0])
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(
            normalized_coverage_change(&[0.0, 0.5, 1.0], 0.0).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        let v = normalized_coverage_change(&[0.3, 0.8], 0.5).unwrap();
        assert!((v[0] + 0.4).abs() < 1e-12 && (v[1] - 0.6).abs() < 1e-12);
        assert!(matches!(
            normalized_coverage_change(&[0.4, 0.4], 0.4),
            Err(Error::Degenerate(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn coverage_change_spans_unit_range(covs in proptest::collection::vec(0.0f64..1.0, 1..10), base in 0.0f64..1.0) {
            if let Ok(v) = normalized_coverage_change(&covs, base) {
                let max = v.iter().copied().fold(0.0, f64::max);
                let min = v.iter().copied().fold(0.0, f64::min);
                proptest::prop_assert!((max - min - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn suites_replace_exact_counts() {
        let base: Vec<i32> = (0..1000).collect();
        let errors: Vec<i32> = (-200..0).collect();
        let suites = error_sensitivity_suites(&base, &errors, &[0.0, 0.01, 0.1], 2, 5).unwrap();
        assert_eq!(suites.len(), 6);
        assert_eq!(suites[0].items, base);
        assert_eq!(suites[2].replaced, 100);
        assert_eq!(suites[2].items.iter().filter(|&&v| v < 0).count(), 100);
        assert!(suites[1]
            .positions
            .iter()
            .all(|p| suites[2].positions.contains(p)));
        assert_eq!(
            suites,
            error_sensitivity_suites(&base, &errors, &[0.0, 0.01, 0.1], 2, 5).unwrap()
        );
        assert_ne!(suites[2].items, suites[5].items);
        assert!(matches!(
            error_sensitivity_suites(&base, &errors[..50], &[0.1], 1, 5),
            Err(Error::InsufficientErrors {
                needed: 100,
                available: 50
            })
        ));
    }

    #[test]
    fn correlations() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[1.0, 10.0, 100.0, 1000.0]), Some(1.0));
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(pearson(&x, &[1.0; 4]), None);
    }

    #[test]
    fn identical_paths_are_fully_similar() {
        let layers = vec![vec![1, 2], vec![0]];
        let samples: Vec<PathSample> = (0..8)
            .map(|i| sample(i % 2, i % 4 / 2, layers.clone()))
            .collect();
        let r = similarity_stats(&samples, 100, 0);
        for m in [
            r.intra_class,
            r.inter_class,
            r.intra_cluster,
            r.inter_cluster,
        ] {
            assert_eq!(m, Some(1.0));
        }
        assert!(r.flags.is_empty());
    }

    #[test]
    fn pair_means_match_brute_force() {
        let mut rng = Stream::Test.rng(3);
        let samples: Vec<PathSample> = (0..20)
            .map(|i| {
                let layers = (0..2)
                    .map(|_| {
                        (0..8)
                            .filter(|_| rand::Rng::random_bool(&mut rng, 0.4))
                            .collect()
                    })
                    .collect();
                sample(i % 3, i % 2, layers)
            })
            .collect();
        let r = similarity_stats(&samples, 100, 0);
        let mut acc = [(0.0, 0usize); 4];
        for i in 0..20 {
            for j in 0..20 {
                if i >= j {
                    continue;
                }
                let s = layers_similarity(&samples[i].layers, &samples[j].layers);
                let same_class = samples[i].class == samples[j].class;
                let same_cluster = samples[i].cluster == samples[j].cluster;
                let mut add = |k: usize| {
                    acc[k].0 += s;
                    acc[k].1 += 1;
                };
                if same_class {
                    add(0);
                    add(if same_cluster { 2 } else { 3 });
                } else {
                    add(1);
                }
            }
        }
        let got = [
            r.intra_class,
            r.inter_class,
            r.intra_cluster,
            r.inter_cluster,
        ];
        for k in 0..4 {
            assert!((got[k].unwrap() - acc[k].0 / acc[k].1 as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples_are_flagged() {
        let r = similarity_stats(&[sample(0, 0, vec![vec![1]])], 100, 0);
        assert_eq!(r.intra_class, None);
        assert!(r.flags.contains(&SimilarityFlag::SingleClass));
        assert!(r.flags.contains(&SimilarityFlag::NoIntraClassPairs));
    }
}
