//! Hand-derived gradients, a small SGD trainer for fixture networks, and
//! the PGD attack.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::model::{ForwardPass, Layer, LayerKind, Model, NeuronMask, PostOp, PostStage};
use crate::rng::Stream;
use crate::tensor::{ConvGeometry, Tensor};
use crate::{Error, Result};

/// Inputs of uniform shape with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            if let Some(bad) = inputs.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    left: first.shape().to_vec(),
                    right: bad.shape().to_vec(),
                });
            }
        }
        Ok(LabeledDataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }

    pub fn check_labels(&self, class_count: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= class_count) {
            Some(&label) => Err(Error::InvalidLabel { label, class_count }),
            None => Ok(()),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn accuracy(&self, model: &Model) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let mut correct = 0usize;
        for (x, &y) in self.inputs.iter().zip(&self.labels) {
            if model.predict(x)?.0 == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "learning rate and batch size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPlan {
    Dense {
        units: usize,
        relu: bool,
    },
    Conv2d {
        kernels: usize,
        size: usize,
        stride: usize,
        padding: usize,
        relu: bool,
        /// Optional `(window, stride)` max-pool after the activation.
        pool: Option<(usize, usize)>,
    },
}

/// Layer plan of a network before it has weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerPlan>,
}

impl Architecture {
    /// Fully connected net with relu on every hidden layer, e.g. `[2, 16, 16, 3]`.
    pub fn mlp(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an mlp needs input and output widths");
        let last = widths.len() - 2;
        Architecture {
            input_shape: vec![widths[0]],
            layers: widths[1..]
                .iter()
                .enumerate()
                .map(|(i, &units)| LayerPlan::Dense {
                    units,
                    relu: i != last,
                })
                .collect(),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Result<Model> {
        let mut rng = Stream::WeightInit.rng(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, plan) in self.layers.iter().enumerate() {
            let next_is_dense = matches!(self.layers.get(i + 1), Some(LayerPlan::Dense { .. }));
            let (layer, out_shape) = match *plan {
                LayerPlan::Dense { units, relu } => {
                    let fan_in: usize = shape.iter().product();
                    let weight = uniform(&[units, fan_in], fan_in, &mut rng);
                    let post = if relu { vec![PostOp::Relu] } else { vec![] };
                    (
                        Layer::dense(weight, Tensor::zeros(&[units]), post),
                        vec![units],
                    )
                }
                LayerPlan::Conv2d {
                    kernels,
                    size,
                    stride,
                    padding,
                    relu,
                    pool,
                } => {
                    if shape.len() != 3 {
                        return Err(Error::InvalidModel(format!(
                            "conv layer {i} needs a C×H×W input, got {shape:?}"
                        )));
                    }
                    let kshape = [kernels, shape[0], size, size];
                    let geo = ConvGeometry::new(&shape, &kshape, stride, padding)?;
                    let weight = uniform(&kshape, shape[0] * size * size, &mut rng);
                    let mut post = Vec::new();
                    if relu {
                        post.push(PostOp::Relu);
                    }
                    let mut out = geo.output_shape().to_vec();
                    if let Some((window, pstride)) = pool {
                        post.push(PostOp::MaxPool {
                            window,
                            stride: pstride,
                        });
                        out = vec![
                            out[0],
                            out[1].saturating_sub(window) / pstride + 1,
                            out[2].saturating_sub(window) / pstride + 1,
                        ];
                    }
                    if next_is_dense {
                        post.push(PostOp::Flatten);
                    }
                    let layer =
                        Layer::conv2d(weight, Tensor::zeros(&[kernels]), stride, padding, post);
                    (layer, out)
                }
            };
            layers.push(layer);
            shape = out_shape;
        }
        Model::new(self.input_shape.clone(), layers)
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = libm::sqrtf(6.0 / fan_in as f32);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
    )
    .expect("shape and length agree")
}

/// Scalar whose input gradient [`grad_input`] computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Softmax cross-entropy against a label.
    CrossEntropy { label: usize },
    /// A single raw logit.
    TargetLogit { class: usize },
}

impl Objective {
    pub fn value(&self, logits: &Tensor) -> f64 {
        match *self {
            Objective::CrossEntropy { label } => cross_entropy(logits, label),
            Objective::TargetLogit { class } => logits.data()[class] as f64,
        }
    }

    fn logit_gradient(&self, logits: &Tensor) -> Vec<f64> {
        match *self {
            Objective::CrossEntropy { label } => {
                let mut p = softmax(logits);
                p[label] -= 1.0;
                p
            }
            Objective::TargetLogit { class } => {
                let mut g = vec![0.0; logits.len()];
                g[class] = 1.0;
                g
            }
        }
    }
}

fn softmax(logits: &Tensor) -> Vec<f64> {
    let max = logits
        .data()
        .iter()
        .fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits
        .data()
        .iter()
        .map(|&v| libm::exp(v as f64 - max))
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn cross_entropy(logits: &Tensor, label: usize) -> f64 {
    let max = logits
        .data()
        .iter()
        .fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = max
        + libm::log(
            logits
                .data()
                .iter()
                .map(|&v| libm::exp(v as f64 - max))
                .sum::<f64>(),
        );
    lse - logits.data()[label] as f64
}

struct ParamGrad {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Backpropagates `grad_logits` through `pass`. Masked neurons are
/// constants, so no gradient flows through them.
fn backward(
    model: &Model,
    pass: &ForwardPass,
    grad_logits: Vec<f64>,
    mask: Option<&NeuronMask>,
    params: Option<&mut Vec<ParamGrad>>,
) -> Vec<f64> {
    let offset = usize::from(model.input_neurons());
    let n_layers = model.layers().len();
    let mut param_grads = params;
    let mut g = grad_logits;
    for i in (0..n_layers).rev() {
        let layer = &model.layers()[i];
        let rec = &pass.records[i];
        if i + 1 < n_layers {
            if let Some(mask) = mask {
                zero_masked(&mut g, rec.output.shape(), mask, i + offset);
            }
        }
        for stage in rec.stages.iter().rev() {
            match stage {
                PostStage::Relu { input } => {
                    for (gv, &x) in g.iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                }
                PostStage::MaxPool {
                    input_shape,
                    winners,
                } => {
                    let mut up = vec![0.0; input_shape.iter().product()];
                    for (gv, &w) in g.iter().zip(winners) {
                        up[w] += gv;
                    }
                    g = up;
                }
            }
        }
        // g is now d/d(pre-activation)
        let input = rec.input.data();
        let mut g_in = vec![0.0f64; input.len()];
        match &layer.kind {
            LayerKind::Dense { weight, .. } => {
                let in_dim = input.len();
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    let row = &weight.data()[o * in_dim..(o + 1) * in_dim];
                    for (gi, &w) in g_in.iter_mut().zip(row) {
                        *gi += go * w as f64;
                    }
                }
                if let Some(pg) = param_grads.as_deref_mut() {
                    let pg = &mut pg[i];
                    for (o, &go) in g.iter().enumerate() {
                        pg.bias[o] += go;
                        for (k, &x) in input.iter().enumerate() {
                            pg.weight[o * in_dim + k] += go * x as f64;
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                kernels,
                stride,
                padding,
                ..
            } => {
                let geo = ConvGeometry::new(rec.input.shape(), kernels.shape(), *stride, *padding)
                    .expect("validated at model construction");
                let kd = kernels.data();
                geo.for_each_tap(|o, inp, k| {
                    g_in[inp] += g[o] * kd[k] as f64;
                });
                if let Some(pg) = param_grads.as_deref_mut() {
                    let pg = &mut pg[i];
                    geo.for_each_tap(|o, inp, k| {
                        pg.weight[k] += g[o] * input[inp] as f64;
                    });
                    let plane = geo.out_h * geo.out_w;
                    for (o, &go) in g.iter().enumerate() {
                        pg.bias[o / plane] += go;
                    }
                }
            }
        }
        g = g_in;
    }
    if model.input_neurons() {
        if let Some(mask) = mask {
            zero_masked(&mut g, model.input_shape(), mask, 0);
        }
    }
    g
}

fn zero_masked(g: &mut [f64], shape: &[usize], mask: &NeuronMask, layer: usize) {
    let plane = if shape.len() == 3 {
        shape[1] * shape[2]
    } else {
        1
    };
    for id in mask.iter().filter(|id| id.layer == layer) {
        g[id.unit * plane..(id.unit + 1) * plane].fill(0.0);
    }
}

/// Exact gradient of `objective` with respect to the input.
pub fn grad_input(model: &Model, x: &Tensor, objective: Objective) -> Result<Tensor> {
    grad_input_masked(model, x, objective, None)
}

pub fn grad_input_masked(
    model: &Model,
    x: &Tensor,
    objective: Objective,
    mask: Option<&NeuronMask>,
) -> Result<Tensor> {
    check_objective(model, objective)?;
    let pass = model.forward_pass(x, mask)?;
    let g = backward(
        model,
        &pass,
        objective.logit_gradient(pass.logits()),
        mask,
        None,
    );
    Tensor::new(
        x.shape().to_vec(),
        g.into_iter().map(|v| v as f32).collect(),
    )
}

fn check_objective(model: &Model, objective: Objective) -> Result<()> {
    let class = match objective {
        Objective::CrossEntropy { label } => label,
        Objective::TargetLogit { class } => class,
    };
    if class >= model.class_count() {
        return Err(Error::InvalidLabel {
            label: class,
            class_count: model.class_count(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub train_accuracy: f64,
    /// Mean cross-entropy of the last epoch (`NaN` when no epoch ran).
    pub final_loss: f64,
}

/// Mini-batch SGD on softmax cross-entropy. Deterministic given the seed.
pub fn train_sgd(
    arch: &Architecture,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let mut model = arch.init(cfg.seed)?;
    data.check_labels(model.class_count())?;
    let mut rng = Stream::Shuffle.rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<ParamGrad> = model
                .layers()
                .iter()
                .map(|l| ParamGrad {
                    weight: vec![0.0; l.weight().len()],
                    bias: vec![0.0; l.bias().len()],
                })
                .collect();
            for &idx in batch {
                let objective = Objective::CrossEntropy {
                    label: data.labels[idx],
                };
                let pass = model.forward_pass(&data.inputs[idx], None)?;
                epoch_loss += objective.value(pass.logits());
                backward(
                    &model,
                    &pass,
                    objective.logit_gradient(pass.logits()),
                    None,
                    Some(&mut grads),
                );
            }
            let step = cfg.learning_rate as f64 / batch.len() as f64;
            for (layer, g) in model.layers_mut().iter_mut().zip(&grads) {
                let (w, b) = layer.params_mut();
                for (p, d) in w.data_mut().iter_mut().zip(&g.weight) {
                    *p = (*p as f64 - step * d) as f32;
                }
                for (p, d) in b.data_mut().iter_mut().zip(&g.bias) {
                    *p = (*p as f64 - step * d) as f32;
                }
            }
        }
        final_loss = epoch_loss / data.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                learning_rate: cfg.learning_rate,
            });
        }
    }
    model.rehash();
    if model
        .layers()
        .iter()
        .any(|l| !l.weight().is_finite() || !l.bias().is_finite())
    {
        return Err(Error::Diverged {
            epoch: cfg.epochs.saturating_sub(1),
            learning_rate: cfg.learning_rate,
        });
    }
    let train_accuracy = data.accuracy(&model)?;
    Ok(TrainOutcome {
        model,
        train_accuracy,
        final_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    /// L∞ budget.
    pub eps: f32,
    pub step: f32,
    pub iters: usize,
    pub seed: u64,
    /// Valid input range, enforced after every step.
    pub clip: Option<(f32, f32)>,
}

impl PgdConfig {
    /// 20 iterations with step `eps / 8`, inputs clipped to `[0, 1]`.
    pub fn with_eps(eps: f32, seed: u64) -> Self {
        PgdConfig {
            eps,
            step: eps / 8.0,
            iters: 20,
            seed,
            clip: Some((0.0, 1.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    /// Whether the model no longer predicts the label.
    pub fooled: bool,
}

/// Projected sign-gradient ascent on cross-entropy from a random start
/// inside the L∞ ball. `sample` selects the random start stream, so attacks
/// on different samples are independent and order-free.
pub fn pgd_attack(
    model: &Model,
    x: &Tensor,
    label: usize,
    cfg: &PgdConfig,
    sample: u64,
) -> Result<AttackOutcome> {
    model.check_input(x)?;
    check_objective(model, Objective::CrossEntropy { label })?;
    if !cfg.eps.is_finite() || cfg.eps < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "eps must be finite and >= 0, got {}",
            cfg.eps
        )));
    }
    let mut adv = x.clone();
    if cfg.eps > 0.0 {
        let mut rng = Stream::AttackStart.rng_indexed(cfg.seed, sample);
        for (a, &orig) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = project(orig + rng.random_range(-cfg.eps..=cfg.eps), orig, cfg);
        }
        for _ in 0..cfg.iters {
            let g = grad_input(model, &adv, Objective::CrossEntropy { label })?;
            for ((a, &gv), &orig) in adv.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                let dir = if gv > 0.0 {
                    1.0
                } else if gv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                *a = project(*a + cfg.step * dir, orig, cfg);
            }
        }
    }
    let fooled = model.predict(&adv)?.0 != label;
    Ok(AttackOutcome {
        adversarial: adv,
        fooled,
    })
}

/// Clips to the valid range, then into the eps-ball around `orig`, nudging
/// by ulps until the float distance itself respects the budget.
fn project(v: f32, orig: f32, cfg: &PgdConfig) -> f32 {
    let mut v = v;
    if let Some((lo, hi)) = cfg.clip {
        v = v.clamp(lo, hi);
    }
    v = v.clamp(orig - cfg.eps, orig + cfg.eps);
    while (v - orig).abs() > cfg.eps {
        v = step_toward(v, orig);
    }
    v
}

fn step_toward(v: f32, target: f32) -> f32 {
    if v == target {
        return v;
    }
    let bits = v.to_bits();
    let up = (v < target) == (v >= 0.0);
    let next = if v == 0.0 {
        // 0 and -0: step to the smallest subnormal on the target's side
        if target > 0.0 {
            1
        } else {
            0x8000_0001
        }
    } else if up {
        bits + 1
    } else {
        bits - 1
    };
    f32::from_bits(next)
}
