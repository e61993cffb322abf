//! Neuron-level baseline criteria: neuron coverage (NC), k-multisection
//! neuron coverage (KMNC) and neuron boundary coverage (NBC).
//!
//! All three read the per-neuron activations of [`ActivationTrace`], so a
//! conv neuron is a channel valued at its spatial mean.

use alloc::vec::Vec;

use crate::bitset::BitSet;
use crate::model::{ActivationTrace, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-neuron `[low, high]` activation range seen on profiling data.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRanges {
    pub low: Vec<Vec<f32>>,
    pub high: Vec<Vec<f32>>,
}

impl ActivationRanges {
    pub fn from_trace(trace: &ActivationTrace) -> Self {
        ActivationRanges {
            low: trace.layers.clone(),
            high: trace.layers.clone(),
        }
    }

    pub fn observe(&mut self, trace: &ActivationTrace) {
        for (l, acts) in trace.layers.iter().enumerate() {
            for (u, &v) in acts.iter().enumerate() {
                self.low[l][u] = self.low[l][u].min(v);
                self.high[l][u] = self.high[l][u].max(v);
            }
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.low.iter().map(Vec::len).sum()
    }

    /// Neurons with `low == high`, as `(layer, unit)`.
    pub fn degenerate(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, (lo, hi)) in self.low.iter().zip(&self.high).enumerate() {
            for u in 0..lo.len() {
                if lo[u] == hi[u] {
                    out.push((l, u));
                }
            }
        }
        out
    }
}

pub fn profile_ranges(model: &Model, inputs: &[Tensor]) -> Result<ActivationRanges> {
    let (first, rest) = inputs
        .split_first()
        .ok_or(Error::EmptyInput("profiling data"))?;
    let mut ranges = ActivationRanges::from_trace(&model.forward(first, None)?);
    for x in rest {
        ranges.observe(&model.forward(x, None)?);
    }
    Ok(ranges)
}

/// Neurons whose activation exceeded `threshold` on some input.
#[derive(Debug, Clone, PartialEq)]
pub struct NcState {
    pub threshold: f32,
    hit: BitSet,
}

impl NcState {
    pub fn new(model: &Model, threshold: f32) -> Self {
        NcState {
            threshold,
            hit: BitSet::new(model.total_neurons()),
        }
    }

    pub fn observe(&mut self, trace: &ActivationTrace) {
        for (i, &v) in trace.layers.iter().flatten().enumerate() {
            if v > self.threshold {
                self.hit.insert(i);
            }
        }
    }

    pub fn hit(&self) -> &BitSet {
        &self.hit
    }

    pub fn ratio(&self) -> f64 {
        ratio(&self.hit)
    }
}

fn ratio(bits: &BitSet) -> f64 {
    if bits.is_empty() {
        0.0
    } else {
        bits.count_ones() as f64 / bits.len() as f64
    }
}

/// Section of `v` among `k` equal sections of `[low, high]`, or `None` when
/// outside. A point range only has section 0, hit by the point itself.
pub fn kmnc_section(v: f32, low: f32, high: f32, k: usize) -> Option<usize> {
    if v < low || v > high {
        return None;
    }
    if low == high {
        return Some(0);
    }
    let pos = (v as f64 - low as f64) / (high as f64 - low as f64) * k as f64;
    Some((pos as usize).min(k - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmncState {
    pub k: usize,
    ranges: ActivationRanges,
    hit: BitSet,
}

impl KmncState {
    pub fn new(ranges: ActivationRanges, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        let n = ranges.neuron_count();
        Ok(KmncState {
            k,
            ranges,
            hit: BitSet::new(n * k),
        })
    }

    pub fn observe(&mut self, trace: &ActivationTrace) {
        let mut i = 0;
        for (l, acts) in trace.layers.iter().enumerate() {
            for (u, &v) in acts.iter().enumerate() {
                if let Some(s) =
                    kmnc_section(v, self.ranges.low[l][u], self.ranges.high[l][u], self.k)
                {
                    self.hit.insert(i * self.k + s);
                }
                i += 1;
            }
        }
    }

    pub fn hit(&self) -> &BitSet {
        &self.hit
    }

    pub fn ratio(&self) -> f64 {
        ratio(&self.hit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbcMode {
    /// One cell below `low` and one above `high` per neuron.
    Corners,
    /// Each side split into `k` sections one range-width wide in total,
    /// the outermost section absorbing everything beyond.
    Sections(usize),
}

impl NbcMode {
    fn per_side(self) -> usize {
        match self {
            NbcMode::Corners => 1,
            NbcMode::Sections(k) => k,
        }
    }
}

/// Side and section of `v` outside `[low, high]`; side 0 is below.
pub fn nbc_cell(v: f32, low: f32, high: f32, mode: NbcMode) -> Option<(usize, usize)> {
    let (side, excess) = if v < low {
        (0, low as f64 - v as f64)
    } else if v > high {
        (1, v as f64 - high as f64)
    } else {
        return None;
    };
    let k = mode.per_side();
    let width = high as f64 - low as f64;
    let section = if k == 1 || width == 0.0 {
        k - 1
    } else {
        ((excess / width * k as f64) as usize).min(k - 1)
    };
    Some((side, section))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NbcState {
    pub mode: NbcMode,
    ranges: ActivationRanges,
    hit: BitSet,
}

impl NbcState {
    pub fn new(ranges: ActivationRanges, mode: NbcMode) -> Result<Self> {
        if mode.per_side() == 0 {
            return Err(Error::InvalidParameter(
                "boundary sections must be at least 1".into(),
            ));
        }
        let n = ranges.neuron_count();
        Ok(NbcState {
            mode,
            hit: BitSet::new(n * 2 * mode.per_side()),
            ranges,
        })
    }

    pub fn observe(&mut self, trace: &ActivationTrace) {
        let per = 2 * self.mode.per_side();
        let mut i = 0;
        for (l, acts) in trace.layers.iter().enumerate() {
            for (u, &v) in acts.iter().enumerate() {
                if let Some((side, s)) =
                    nbc_cell(v, self.ranges.low[l][u], self.ranges.high[l][u], self.mode)
                {
                    self.hit.insert(i * per + side * self.mode.per_side() + s);
                }
                i += 1;
            }
        }
    }

    pub fn hit(&self) -> &BitSet {
        &self.hit
    }

    pub fn ratio(&self) -> f64 {
        ratio(&self.hit)
    }
}

fn traces<'a>(
    model: &'a Model,
    suite: &'a [Tensor],
) -> impl Iterator<Item = Result<ActivationTrace>> + 'a {
    suite.iter().map(move |x| model.forward(x, None))
}

pub fn nc(model: &Model, suite: &[Tensor], threshold: f32) -> Result<f64> {
    let mut s = NcState::new(model, threshold);
    for t in traces(model, suite) {
        s.observe(&t?);
    }
    Ok(s.ratio())
}

pub fn kmnc(model: &Model, suite: &[Tensor], ranges: &ActivationRanges, k: usize) -> Result<f64> {
    check_ranges(model, ranges)?;
    let mut s = KmncState::new(ranges.clone(), k)?;
    for t in traces(model, suite) {
        s.observe(&t?);
    }
    Ok(s.ratio())
}

pub fn nbc(
    model: &Model,
    suite: &[Tensor],
    ranges: &ActivationRanges,
    mode: NbcMode,
) -> Result<f64> {
    check_ranges(model, ranges)?;
    let mut s = NbcState::new(ranges.clone(), mode)?;
    for t in traces(model, suite) {
        s.observe(&t?);
    }
    Ok(s.ratio())
}

fn check_ranges(model: &Model, ranges: &ActivationRanges) -> Result<()> {
    let fits = ranges.low.len() == model.coverage_layer_count()
        && (0..ranges.low.len()).all(|l| {
            ranges.low[l].len() == model.neuron_count(l)
                && ranges.high[l].len() == ranges.low[l].len()
        });
    if fits {
        Ok(())
    } else {
        Err(Error::InvalidParameter(
            "activation ranges do not match the model".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;

    fn setup() -> (Model, Vec<Tensor>) {
        let m = fixture::mlp(&[2, 12, 12, 3], 3);
        let data = fixture::blobs(&fixture::BlobSpec::new(2, 3, 30), 4);
        (m, data.inputs().to_vec())
    }

    #[test]
    fn ranges_match_naive_pass() {
        let (m, xs) = setup();
        let r = profile_ranges(&m, &xs).unwrap();
        for l in 0..m.coverage_layer_count() {
            for u in 0..m.neuron_count(l) {
                let vals: Vec<f32> = xs
                    .iter()
                    .map(|x| m.forward(x, None).unwrap().layers[l][u])
                    .collect();
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                assert_eq!((r.low[l][u], r.high[l][u]), (lo, hi));
            }
        }
        let sub = profile_ranges(&m, &xs[..10]).unwrap();
        for l in 0..r.low.len() {
            for u in 0..r.low[l].len() {
                assert!(r.low[l][u] <= sub.low[l][u] && sub.high[l][u] <= r.high[l][u]);
            }
        }
        assert!(profile_ranges(&m, &[]).is_err());
    }

    #[test]
    fn nc_thresholds() {
        let (m, xs) = setup();
        assert_eq!(nc(&m, &xs, 1e9).unwrap(), 0.0);
        assert!(nc(&m, &xs, 0.0).unwrap() >= nc(&m, &xs[..5], 0.0).unwrap());
        let positive = crate::model::Model::new(
            vec![1],
            vec![
                crate::Layer::dense(
                    Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
                    Tensor::vector(vec![0.5, 0.5]),
                    vec![crate::PostOp::Relu],
                ),
                crate::Layer::dense(
                    Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                    Tensor::vector(vec![0.0, 0.0]),
                    vec![],
                ),
            ],
        )
        .unwrap();
        assert_eq!(
            nc(&positive, &[Tensor::vector(vec![0.3])], 0.0).unwrap(),
            1.0
        );
    }

    #[test]
    fn training_suite_has_no_boundary_hits() {
        let (m, xs) = setup();
        let r = profile_ranges(&m, &xs).unwrap();
        assert_eq!(nbc(&m, &xs, &r, NbcMode::Corners).unwrap(), 0.0);
        assert_eq!(nbc(&m, &xs, &r, NbcMode::Sections(10)).unwrap(), 0.0);
    }

    #[test]
    fn single_input_hits_one_section_each() {
        let (m, xs) = setup();
        let r = profile_ranges(&m, &xs).unwrap();
        let v = kmnc(&m, &xs[..1], &r, 1000).unwrap();
        assert!((v - 1.0 / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn kmnc_matches_bucketing_oracle() {
        let (m, xs) = setup();
        let r = profile_ranges(&m, &xs[..40]).unwrap();
        let k = 7;
        let mut hit = std::collections::BTreeSet::new();
        let mut flat = 0;
        for l in 0..m.coverage_layer_count() {
            for u in 0..m.neuron_count(l) {
                let (lo, hi) = (r.low[l][u] as f64, r.high[l][u] as f64);
                for x in &xs {
                    let v = m.forward(x, None).unwrap().layers[l][u] as f64;
                    if v < lo || v > hi {
                        continue;
                    }
                    let s = if hi == lo {
                        0
                    } else {
                        (0..k)
                            .find(|&s| v < lo + (hi - lo) * (s + 1) as f64 / k as f64)
                            .unwrap_or(k - 1)
                    };
                    hit.insert((flat, s));
                }
                flat += 1;
            }
        }
        let expect = hit.len() as f64 / (flat * k) as f64;
        assert!((kmnc(&m, &xs, &r, k).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn boundary_cells() {
        assert_eq!(nbc_cell(0.5, 0.0, 1.0, NbcMode::Corners), None);
        assert_eq!(nbc_cell(-0.1, 0.0, 1.0, NbcMode::Corners), Some((0, 0)));
        assert_eq!(nbc_cell(1.1, 0.0, 1.0, NbcMode::Corners), Some((1, 0)));
        assert_eq!(
            nbc_cell(1.25, 0.0, 1.0, NbcMode::Sections(10)),
            Some((1, 2))
        );
        assert_eq!(nbc_cell(9.0, 0.0, 1.0, NbcMode::Sections(10)), Some((1, 9)));
        assert_eq!(nbc_cell(2.0, 1.0, 1.0, NbcMode::Sections(10)), Some((1, 9)));
        assert_eq!(kmnc_section(1.0, 1.0, 1.0, 10), Some(0));
        assert_eq!(kmnc_section(1.0, 0.0, 1.0, 10), Some(9));
        assert_eq!(kmnc_section(0.0, 0.0, 1.0, 10), Some(0));
    }
}
