//! Layer-wise relevance propagation.
//!
//! Relevance starts as the target logit on the output unit and flows back
//! one layer at a time. Dense and conv layers split a unit's relevance over
//! its inputs in proportion to their weighted contributions (epsilon rule,
//! or the `z+` rule on request). Relu passes relevance through unchanged and
//! max-pooling hands each output's relevance to its winning input. The share
//! of relevance a bias absorbs is dropped and reported per layer.

use alloc::vec;
use alloc::vec::Vec;

use crate::model::{neuron_sums, ForwardPass, LayerKind, Model, PostStage};
use crate::tensor::ConvGeometry;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrpRule {
    /// `R_i = Σ_j R_j · z_ij / (z_j + ε·sign(z_j))`, with `sign(0) = +1`.
    Epsilon(f64),
    /// `R_i = Σ_j R_j · z_ij⁺ / Σ_i' z_i'j⁺` (the αβ rule with α=1, β=0).
    ZPlus,
}

impl Default for LrpRule {
    fn default() -> Self {
        LrpRule::Epsilon(1e-6)
    }
}

/// Per-coverage-layer neuron relevance for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceTrace {
    /// `R_i^l`; conv neurons carry the sum over their channel map.
    pub layers: Vec<Vec<f64>>,
    /// `g_f(x)`: the logit relevance started from.
    pub origin_logit: f64,
    pub target: usize,
    /// Predicted class of the unmasked network.
    pub predicted: usize,
    /// Relevance absorbed by biases (and the stabiliser) between the output
    /// and each coverage layer. `sum(layers[l]) + bias_leak[l] ≈ origin_logit`.
    pub bias_leak: Vec<f64>,
}

impl RelevanceTrace {
    pub fn layer_sum(&self, layer: usize) -> f64 {
        self.layers[layer].iter().sum()
    }
}

/// Relevance of the predicted class (or `target`) under the default rule.
pub fn relevance(
    model: &Model,
    x: &crate::Tensor,
    target: Option<usize>,
) -> Result<RelevanceTrace> {
    relevance_with(model, x, target, LrpRule::default())
}

pub fn relevance_with(
    model: &Model,
    x: &crate::Tensor,
    target: Option<usize>,
    rule: LrpRule,
) -> Result<RelevanceTrace> {
    let pass = model.forward_pass(x, None)?;
    relevance_from_pass(model, &pass, target, rule)
}

pub(crate) fn relevance_from_pass(
    model: &Model,
    pass: &ForwardPass,
    target: Option<usize>,
    rule: LrpRule,
) -> Result<RelevanceTrace> {
    let logits = pass.logits();
    let predicted = logits.argmax();
    let target = target.unwrap_or(predicted);
    if target >= model.class_count() {
        return Err(Error::InvalidLabel {
            label: target,
            class_count: model.class_count(),
        });
    }
    let origin_logit = logits.data()[target] as f64;
    let offset = usize::from(model.input_neurons());
    let n_cov = model.coverage_layer_count();
    let mut layers = vec![Vec::new(); n_cov];
    let mut bias_leak = vec![0.0; n_cov];

    let mut r = vec![0.0f64; logits.len()];
    r[target] = origin_logit;
    let mut leak = 0.0;
    let n_layers = model.layers().len();
    for i in (0..n_layers).rev() {
        let rec = &pass.records[i];
        if i + 1 < n_layers {
            layers[i + offset] = neuron_sums(&r, rec.output.shape());
            bias_leak[i + offset] = leak;
        }
        for stage in rec.stages.iter().rev() {
            if let PostStage::MaxPool {
                input_shape,
                winners,
            } = stage
            {
                let mut up = vec![0.0; input_shape.iter().product()];
                for (rv, &w) in r.iter().zip(winners) {
                    up[w] += rv;
                }
                r = up;
            }
        }
        let (r_in, absorbed) = linear_rule(&model.layers()[i].kind, rec, &r, rule);
        r = r_in;
        leak += absorbed;
    }
    if model.input_neurons() {
        layers[0] = neuron_sums(&r, model.input_shape());
        bias_leak[0] = leak;
    }
    Ok(RelevanceTrace {
        layers,
        origin_logit,
        target,
        predicted,
        bias_leak,
    })
}

/// Redistributes relevance over a layer's input; returns it with the mass
/// absorbed by biases and the stabiliser.
fn linear_rule(
    kind: &LayerKind,
    rec: &crate::model::LayerRecord,
    r_out: &[f64],
    rule: LrpRule,
) -> (Vec<f64>, f64) {
    let x = rec.input.data();
    // each layer is described by its taps (out, in, weight) and per-output bias
    let (bias, taps): (&[f32], Vec<(usize, usize, f32)>) = match kind {
        LayerKind::Dense { weight, bias } => {
            let in_dim = x.len();
            let wd = weight.data();
            let taps = (0..r_out.len())
                .flat_map(|o| (0..in_dim).map(move |i| (o, i, wd[o * in_dim + i])))
                .collect();
            (bias.data(), taps)
        }
        LayerKind::Conv2d {
            kernels,
            bias,
            stride,
            padding,
        } => {
            let geo = ConvGeometry::new(rec.input.shape(), kernels.shape(), *stride, *padding)
                .expect("validated at model construction");
            let kd = kernels.data();
            let mut taps = Vec::new();
            geo.for_each_tap(|o, i, k| taps.push((o, i, kd[k])));
            (bias.data(), taps)
        }
    };
    let per_bias = r_out.len() / bias.len();
    let bias_of = |o: usize| bias[o / per_bias] as f64;
    let mut r_in = vec![0.0f64; x.len()];
    let mut absorbed = 0.0;
    match rule {
        LrpRule::Epsilon(eps) => {
            let mut z: Vec<f64> = (0..r_out.len()).map(bias_of).collect();
            for &(o, i, w) in &taps {
                z[o] += x[i] as f64 * w as f64;
            }
            let stab: Vec<f64> = z
                .iter()
                .map(|&zj| if zj >= 0.0 { eps } else { -eps })
                .collect();
            let s: Vec<f64> = (0..z.len()).map(|o| r_out[o] / (z[o] + stab[o])).collect();
            for &(o, i, w) in &taps {
                r_in[i] += x[i] as f64 * w as f64 * s[o];
            }
            for o in 0..z.len() {
                absorbed += s[o] * (bias_of(o) + stab[o]);
            }
        }
        LrpRule::ZPlus => {
            let mut denom = vec![0.0f64; r_out.len()];
            for &(o, i, w) in &taps {
                denom[o] += (x[i] as f64 * w as f64).max(0.0);
            }
            for &(o, i, w) in &taps {
                let zp = (x[i] as f64 * w as f64).max(0.0);
                if denom[o] > 0.0 && zp > 0.0 {
                    r_in[i] += zp * r_out[o] / denom[o];
                }
            }
            for o in 0..r_out.len() {
                if denom[o] <= 0.0 {
                    absorbed += r_out[o];
                }
            }
        }
    }
    (r_in, absorbed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture;
    use crate::model::{Layer, PostOp};
    use crate::rng::Stream;
    use crate::Tensor;
    use rand::Rng;

    fn strip_biases(mut m: Model) -> Model {
        for layer in m.layers_mut() {
            layer.params_mut().1.data_mut().fill(0.0);
        }
        m.rehash();
        m
    }

    fn random_input(m: &Model, rng: &mut impl Rng) -> Tensor {
        let n = m.input_shape().iter().product();
        Tensor::new(
            m.input_shape().to_vec(),
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_decomposition() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 2], [w.data(), &[0.0, 0.0]].concat()).unwrap();
        let m = Model::new(vec![2], vec![Layer::dense(w, Tensor::zeros(&[2]), vec![])])
            .unwrap()
            .with_input_neurons(true);
        let r = relevance(&m, &Tensor::vector(vec![2.0, 3.0]), None).unwrap();
        assert_eq!(r.target, 0);
        assert_eq!(r.origin_logit, 5.0);
        assert!((r.layers[0][0] - 2.0).abs() < 1e-5);
        assert!((r.layers[0][1] - 3.0).abs() < 1e-5);
        assert!((r.layer_sum(0) - 5.0).abs() < 1e-5);
    }

    #[test]
    fn single_layer_relevance_is_weight_times_input() {
        let w = Tensor::new(vec![2, 3], vec![0.5, -1.5, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let m = Model::new(
            vec![3],
            vec![Layer::dense(w.clone(), Tensor::zeros(&[2]), vec![])],
        )
        .unwrap()
        .with_input_neurons(true);
        let x = Tensor::vector(vec![0.7, 0.2, 0.9]);
        let r = relevance_with(&m, &x, Some(0), LrpRule::Epsilon(0.0)).unwrap();
        for i in 0..3 {
            let expected = w.data()[i] as f64 * x.data()[i] as f64;
            assert!((r.layers[0][i] - expected).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn zero_input_bias_free_gives_zero_relevance() {
        let m = strip_biases(fixture::mlp(&[3, 5, 4, 2], 3)).with_input_neurons(true);
        let r = relevance(&m, &Tensor::zeros(&[3]), None).unwrap();
        for layer in &r.layers {
            assert!(layer.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conservation_on_bias_free_networks() {
        let mut rng = Stream::Test.rng(10);
        for m in [
            strip_biases(fixture::mlp(&[4, 12, 10, 3], 1)),
            strip_biases(fixture::small_cnn(2)).with_input_neurons(true),
        ] {
            for _ in 0..20 {
                let x = random_input(&m, &mut rng);
                let r = relevance(&m, &x, None).unwrap();
                for l in 0..m.coverage_layer_count() {
                    let err = (r.layer_sum(l) - r.origin_logit).abs();
                    assert!(
                        err <= 0.02 * r.origin_logit.abs() + 1e-4,
                        "layer {l}: {err}"
                    );
                }
            }
        }
    }

    #[test]
    fn leak_accounts_for_biases() {
        let mut rng = Stream::Test.rng(11);
        let m = fixture::small_cnn(4);
        for _ in 0..20 {
            let x = random_input(&m, &mut rng);
            for rule in [LrpRule::default(), LrpRule::ZPlus] {
                let r = relevance_with(&m, &x, None, rule).unwrap();
                for l in 0..m.coverage_layer_count() {
                    let total = r.layer_sum(l) + r.bias_leak[l];
                    assert!((total - r.origin_logit).abs() < 1e-4 * (1.0 + r.origin_logit.abs()));
                }
            }
        }
    }

    #[test]
    fn relevance_lengths_and_determinism() {
        let m = fixture::small_cnn(7);
        let x = Tensor::filled(m.input_shape(), 0.3);
        let a = relevance(&m, &x, Some(1)).unwrap();
        assert_eq!(a, relevance(&m, &x, Some(1)).unwrap());
        for l in 0..m.coverage_layer_count() {
            assert_eq!(a.layers[l].len(), m.neuron_count(l));
        }
        assert!(relevance(&m, &x, Some(3)).is_err());
    }

    #[test]
    fn maxpool_routes_to_winner() {
        // conv 1x1 identity, pool 2x2 over a 2x2 map, dense sum
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let conv = Layer::conv2d(
            k,
            Tensor::zeros(&[1]),
            1,
            0,
            vec![
                PostOp::Relu,
                PostOp::MaxPool {
                    window: 2,
                    stride: 2,
                },
                PostOp::Flatten,
            ],
        );
        let dense = Layer::dense(
            Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap(),
            Tensor::zeros(&[2]),
            vec![],
        );
        let m = Model::new(vec![1, 2, 2], vec![conv, dense])
            .unwrap()
            .with_input_neurons(true);
        let x = Tensor::new(vec![1, 2, 2], vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        let pass = m.forward_pass(&x, None).unwrap();
        let r = relevance_from_pass(&m, &pass, None, LrpRule::Epsilon(0.0)).unwrap();
        assert!((r.layers[1][0] - 0.9).abs() < 1e-6);
        // all input relevance sits on the winning pixel, summed per channel
        assert!((r.layers[0][0] - 0.9).abs() < 1e-6);
    }
}
