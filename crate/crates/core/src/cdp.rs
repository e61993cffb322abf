//! Critical decision paths: per layer, the fewest most relevant neurons
//! whose positive relevance exceeds an `alpha` share of the logit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::lrp::{relevance_from_pass, LrpRule, RelevanceTrace};
use crate::model::{ActivationTrace, Model, NeuronId, NeuronMask};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalPath {
    /// Selected units per coverage layer, ascending.
    pub layers: Vec<Vec<usize>>,
    pub alpha: f64,
    pub sample: Option<usize>,
    /// The logit was not positive, so the budget fell back to `alpha` times
    /// each layer's positive relevance mass.
    pub fallback_budget: bool,
}

impl CriticalPath {
    pub fn empty(layer_count: usize) -> Self {
        CriticalPath {
            layers: vec![Vec::new(); layer_count],
            alpha: 0.0,
            sample: None,
            fallback_budget: false,
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn with_sample(mut self, sample: usize) -> Self {
        self.sample = Some(sample);
        self
    }

    pub fn to_mask(&self) -> NeuronMask {
        NeuronMask::from_layer_sets(&self.layers)
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )))
    }
}

/// Positive-relevance units of every layer in selection order (relevance
/// descending, lower unit first on ties), cut at the `alpha` budget.
pub fn ranked_selection(r: &RelevanceTrace, alpha: f64) -> Result<(Vec<Vec<usize>>, bool)> {
    check_alpha(alpha)?;
    let g = r.origin_logit;
    let fallback = g <= 0.0;
    let layers = r
        .layers
        .iter()
        .map(|rel| {
            let mut order: Vec<usize> = (0..rel.len()).filter(|&i| rel[i] > 0.0).collect();
            order.sort_by(|&a, &b| {
                rel[b]
                    .partial_cmp(&rel[a])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let budget = if fallback {
                alpha * order.iter().map(|&i| rel[i]).sum::<f64>()
            } else {
                alpha * g
            };
            let mut acc = 0.0;
            let mut take = order.len();
            for (n, &i) in order.iter().enumerate() {
                acc += rel[i];
                if acc > budget {
                    take = n + 1;
                    break;
                }
            }
            order.truncate(take);
            order
        })
        .collect();
    Ok((layers, fallback))
}

/// Extracts the `alpha`-critical path. When no prefix exceeds the budget,
/// every positive-relevance neuron of the layer is kept.
pub fn extract_cdp(r: &RelevanceTrace, alpha: f64) -> Result<CriticalPath> {
    let (mut layers, fallback_budget) = ranked_selection(r, alpha)?;
    for l in &mut layers {
        l.sort_unstable();
    }
    Ok(CriticalPath {
        layers,
        alpha,
        sample: None,
        fallback_budget,
    })
}

/// Mean fraction of each layer's neurons that the path selects.
pub fn width(p: &CriticalPath, model: &Model) -> f64 {
    if p.layers.is_empty() {
        return 0.0;
    }
    p.layers
        .iter()
        .enumerate()
        .map(|(l, s)| s.len() as f64 / model.neuron_count(l) as f64)
        .sum::<f64>()
        / p.layers.len() as f64
}

/// Every coverage neuron not on the path.
pub fn ncdp(p: &CriticalPath, model: &Model) -> NeuronMask {
    let mut mask = NeuronMask::new();
    for (l, s) in p.layers.iter().enumerate() {
        let mut sel = s.iter().peekable();
        for unit in 0..model.neuron_count(l) {
            if sel.peek() == Some(&&unit) {
                sel.next();
            } else {
                mask.insert(NeuronId::new(l, unit));
            }
        }
    }
    mask
}

/// `(|a ∩ b|, |a ∪ b|)` of two ascending unit lists.
pub fn intersection_union(a: &[usize], b: &[usize]) -> (usize, usize) {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    (inter, a.len() + b.len() - inter)
}

/// Jaccard similarity of two ascending unit lists; two empty sets are
/// identical (1.0).
pub fn layer_jaccard(a: &[usize], b: &[usize]) -> f64 {
    let (inter, union) = intersection_union(a, b);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean per-layer Jaccard similarity of two paths over the same layers.
pub fn path_similarity(p: &CriticalPath, q: &CriticalPath) -> f64 {
    layers_similarity(&p.layers, &q.layers)
}

pub fn layers_similarity(p: &[Vec<usize>], q: &[Vec<usize>]) -> f64 {
    assert_eq!(p.len(), q.len(), "paths span different layer counts");
    if p.is_empty() {
        return 1.0;
    }
    p.iter()
        .zip(q)
        .map(|(a, b)| layer_jaccard(a, b))
        .sum::<f64>()
        / p.len() as f64
}

/// Everything the pipeline needs about one input, from a single forward pass.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub trace: ActivationTrace,
    pub relevance: RelevanceTrace,
    pub path: CriticalPath,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathExtractor {
    pub alpha: f64,
    pub rule: LrpRule,
}

impl PathExtractor {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(PathExtractor {
            alpha,
            rule: LrpRule::default(),
        })
    }

    pub fn with_rule(mut self, rule: LrpRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn analyze(&self, model: &Model, x: &Tensor) -> Result<Analysis> {
        let pass = model.forward_pass(x, None)?;
        let relevance = relevance_from_pass(model, &pass, None, self.rule)?;
        let path = extract_cdp(&relevance, self.alpha)?;
        Ok(Analysis {
            trace: model.trace_from(&pass),
            relevance,
            path,
        })
    }

    pub fn extract(&self, model: &Model, x: &Tensor) -> Result<CriticalPath> {
        self.analyze(model, x).map(|a| a.path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskTarget {
    Cdp,
    Ncdp,
}

/// Whether masking changes the prediction of `x`.
pub fn prediction_changes(model: &Model, x: &Tensor, mask: &NeuronMask) -> Result<bool> {
    let (before, _) = model.predict(x)?;
    let (after, _) = model.predict_masked(x, Some(mask))?;
    Ok(before != after)
}

/// Fraction of inputs whose prediction changes under the mask `mask_for`
/// picks for them.
pub fn inconsistency_rate(
    model: &Model,
    inputs: &[Tensor],
    mut mask_for: impl FnMut(usize, &Tensor) -> Result<NeuronMask>,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let mut changed = 0usize;
    for (i, x) in inputs.iter().enumerate() {
        let mask = mask_for(i, x)?;
        if prediction_changes(model, x, &mask)? {
            changed += 1;
        }
    }
    Ok(changed as f64 / inputs.len() as f64)
}

/// Masks every sample's own CDP (or NCDP) and reports the inconsistency rate.
pub fn mask_eval(model: &Model, inputs: &[Tensor], alpha: f64, target: MaskTarget) -> Result<f64> {
    let extractor = PathExtractor::new(alpha)?;
    inconsistency_rate(model, inputs, |_, x| {
        let p = extractor.extract(model, x)?;
        Ok(match target {
            MaskTarget::Cdp => p.to_mask(),
            MaskTarget::Ncdp => ncdp(&p, model),
        })
    })
}

/// Width and both inconsistency rates of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCriticality {
    pub width: f64,
    /// The budget fell back to the positive relevance mass.
    pub fallback_budget: bool,
    pub cdp_changes: bool,
    pub ncdp_changes: bool,
}

pub fn sample_criticality(
    model: &Model,
    x: &Tensor,
    extractor: &PathExtractor,
) -> Result<SampleCriticality> {
    let a = extractor.analyze(model, x)?;
    let before = a.trace.predicted;
    let flips = |mask: &NeuronMask| -> Result<bool> {
        Ok(model.predict_masked(x, Some(mask))?.0 != before)
    };
    Ok(SampleCriticality {
        width: width(&a.path, model),
        fallback_budget: a.path.fallback_budget,
        cdp_changes: flips(&a.path.to_mask())?,
        ncdp_changes: flips(&ncdp(&a.path, model))?,
    })
}

/// Mean width, Inc.C and Inc.NC over a set of inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalitySummary {
    pub width: f64,
    pub inc_cdp: f64,
    pub inc_ncdp: f64,
    pub samples: usize,
    pub fallback_budget: usize,
}

impl CriticalitySummary {
    pub fn from_samples(samples: &[SampleCriticality]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("evaluation data"));
        }
        let n = samples.len() as f64;
        Ok(CriticalitySummary {
            width: samples.iter().map(|s| s.width).sum::<f64>() / n,
            inc_cdp: samples.iter().filter(|s| s.cdp_changes).count() as f64 / n,
            inc_ncdp: samples.iter().filter(|s| s.ncdp_changes).count() as f64 / n,
            samples: samples.len(),
            fallback_budget: samples.iter().filter(|s| s.fallback_budget).count(),
        })
    }
}

pub fn criticality(model: &Model, inputs: &[Tensor], alpha: f64) -> Result<CriticalitySummary> {
    let extractor = PathExtractor::new(alpha)?;
    let samples = inputs
        .iter()
        .map(|x| sample_criticality(model, x, &extractor))
        .collect::<Result<Vec<_>>>()?;
    CriticalitySummary::from_samples(&samples)
}

pub const BANDS: usize = 5;

/// Splits each layer's ranked CDP into five contiguous relevance bands
/// (earlier bands take the remainder) and returns the mask of each band.
pub fn relevance_bands(ranked: &[Vec<usize>]) -> [NeuronMask; BANDS] {
    let mut bands: [NeuronMask; BANDS] = Default::default();
    for (l, units) in ranked.iter().enumerate() {
        let (base, rem) = (units.len() / BANDS, units.len() % BANDS);
        let mut start = 0;
        for (b, band) in bands.iter_mut().enumerate() {
            let size = base + usize::from(b < rem);
            for &u in &units[start..start + size] {
                band.insert(NeuronId::new(l, u));
            }
            start += size;
        }
    }
    bands
}

/// Which of the five relevance bands flip the prediction of `x` when masked alone.
pub fn sample_band_changes(
    model: &Model,
    x: &Tensor,
    extractor: &PathExtractor,
) -> Result<[bool; BANDS]> {
    let a = extractor.analyze(model, x)?;
    let (ranked, _) = ranked_selection(&a.relevance, extractor.alpha)?;
    let mut out = [false; BANDS];
    for (o, band) in out.iter_mut().zip(relevance_bands(&ranked)) {
        *o = model.predict_masked(x, Some(&band))?.0 != a.trace.predicted;
    }
    Ok(out)
}

/// Inconsistency rate of masking each relevance band alone, in band order.
pub fn quintile_mask_eval(model: &Model, inputs: &[Tensor], alpha: f64) -> Result<[f64; BANDS]> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    let extractor = PathExtractor::new(alpha)?;
    let mut counts = [0usize; BANDS];
    for x in inputs {
        for (c, hit) in counts
            .iter_mut()
            .zip(sample_band_changes(model, x, &extractor)?)
        {
            *c += usize::from(hit);
        }
    }
    Ok(counts.map(|c| c as f64 / inputs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    fn trace(layers: Vec<Vec<f64>>, g: f64) -> RelevanceTrace {
        let n = layers.len();
        RelevanceTrace {
            layers,
            origin_logit: g,
            target: 0,
            predicted: 0,
            bias_leak: vec![0.0; n],
        }
    }

    #[test]
    fn hand_evaluated_budget() {
        let r = trace(vec![vec![5.0, 3.0, 2.0, -1.0]], 9.0);
        let p = extract_cdp(&r, 0.8).unwrap();
        assert_eq!(p.layers, vec![vec![0, 1]]);
        assert!(!p.fallback_budget);
    }

    #[test]
    fn alpha_one_at_exact_mass_selects_all_positive() {
        let r = trace(vec![vec![5.0, 3.0, 2.0, -1.0]], 10.0);
        assert_eq!(extract_cdp(&r, 1.0).unwrap().layers, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn non_positive_layer_is_empty() {
        let r = trace(vec![vec![-1.0, 0.0], vec![1.0, 2.0]], 3.0);
        let p = extract_cdp(&r, 0.5).unwrap();
        assert!(p.layers[0].is_empty());
        assert_eq!(p.layers[1], vec![1]);
    }

    #[test]
    fn ties_prefer_lower_units() {
        let r = trace(vec![vec![1.0, 2.0, 2.0, 2.0]], 7.0);
        let (ranked, _) = ranked_selection(&r, 0.5).unwrap();
        assert_eq!(ranked[0], vec![1, 2]);
    }

    #[test]
    fn negative_logit_uses_positive_mass_budget() {
        let r = trace(vec![vec![4.0, 1.0, -6.0]], -1.0);
        let p = extract_cdp(&r, 0.5).unwrap();
        assert!(p.fallback_budget);
        assert_eq!(p.layers[0], vec![0]);
    }

    #[test]
    fn alpha_range_checked() {
        let r = trace(vec![vec![1.0]], 1.0);
        assert!(extract_cdp(&r, 0.0).is_err());
        assert!(extract_cdp(&r, 1.5).is_err());
    }

    #[test]
    fn width_and_ncdp() {
        let m = fixture::mlp(&[2, 10, 10, 3], 1);
        let p = CriticalPath {
            layers: vec![vec![0, 1], vec![0, 1, 2, 3]],
            ..CriticalPath::empty(2)
        };
        assert!((width(&p, &m) - 0.3).abs() < 1e-12);
        assert_eq!(ncdp(&p, &m).len() + p.neuron_count(), 20);
        let full = CriticalPath {
            layers: vec![(0..10).collect(), (0..10).collect()],
            ..CriticalPath::empty(2)
        };
        assert_eq!(width(&full, &m), 1.0);
        assert!(ncdp(&full, &m).is_empty());
        let empty = CriticalPath::empty(2);
        assert_eq!(width(&empty, &m), 0.0);
        assert_eq!(ncdp(&empty, &m), NeuronMask::all(&m));
    }

    #[test]
    fn similarity_cases() {
        let p = |sets: Vec<Vec<usize>>| CriticalPath {
            layers: sets,
            ..CriticalPath::empty(0)
        };
        assert_eq!(
            path_similarity(&p(vec![vec![1, 2]]), &p(vec![vec![1, 2]])),
            1.0
        );
        assert_eq!(path_similarity(&p(vec![vec![1]]), &p(vec![vec![2]])), 0.0);
        assert_eq!(
            path_similarity(&p(vec![vec![1, 2, 3]]), &p(vec![vec![2, 3, 4]])),
            0.5
        );
        assert_eq!(layer_jaccard(&[], &[]), 1.0);
        assert_eq!(layer_jaccard(&[], &[1]), 0.0);
    }

    #[test]
    fn empty_mask_never_changes_predictions() {
        let m = fixture::mlp(&[2, 8, 8, 3], 4);
        let data = fixture::blobs(&fixture::BlobSpec::new(2, 3, 10), 2);
        let rate = inconsistency_rate(&m, data.inputs(), |_, _| Ok(NeuronMask::new())).unwrap();
        assert_eq!(rate, 0.0);
        assert!(inconsistency_rate(&m, &[], |_, _| Ok(NeuronMask::new())).is_err());
    }

    #[test]
    fn bands_split_with_remainder_first() {
        let ranked = vec![(10..17).collect::<Vec<_>>(), vec![1, 2, 3]];
        let bands = relevance_bands(&ranked);
        let sizes: Vec<usize> = bands
            .iter()
            .map(|b| b.iter().filter(|id| id.layer == 0).count())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1, 1, 1]);
        assert!(bands[0].contains(NeuronId::new(0, 10)) && bands[0].contains(NeuronId::new(0, 11)));
        assert!(bands[4].contains(NeuronId::new(0, 16)));
        let small: Vec<usize> = bands
            .iter()
            .map(|b| b.iter().filter(|id| id.layer == 1).count())
            .collect();
        assert_eq!(small, vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn band_rates_are_in_range() {
        let m = fixture::mlp(&[2, 16, 16, 3], 4);
        let data = fixture::blobs(&fixture::BlobSpec::new(2, 3, 10), 2);
        let rates = quintile_mask_eval(&m, data.inputs(), 0.9).unwrap();
        assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    proptest::proptest! {
        #[test]
        fn selections_nest_in_alpha(
            rel in proptest::collection::vec(-2.0f64..5.0, 1..24),
            g in -3.0f64..20.0,
            a in 0.05f64..1.0,
            b in 0.05f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = trace(vec![rel], g);
            let small = extract_cdp(&r, lo).unwrap();
            let large = extract_cdp(&r, hi).unwrap();
            proptest::prop_assert!(small.layers[0].iter().all(|u| large.layers[0].contains(u)));
            for &u in &large.layers[0] {
                proptest::prop_assert!(r.layers[0][u] > 0.0);
            }
        }

        #[test]
        fn similarity_symmetric_and_bounded(
            a in proptest::collection::btree_set(0usize..12, 0..12),
            b in proptest::collection::btree_set(0usize..12, 0..12),
        ) {
            let a: Vec<usize> = a.into_iter().collect();
            let b: Vec<usize> = b.into_iter().collect();
            let s = layer_jaccard(&a, &b);
            proptest::prop_assert_eq!(s, layer_jaccard(&b, &a));
            proptest::prop_assert!((0.0..=1.0).contains(&s));
            proptest::prop_assert_eq!(s == 1.0, a == b);
        }
    }
}
