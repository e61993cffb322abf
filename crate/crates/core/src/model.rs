//! Sequential dense/conv networks, forward execution and neuron identity.
//!
//! A *coverage layer* is a place in the network whose units count as
//! neurons: the output of every parametric layer except the last (after its
//! fused post-ops), and optionally the raw input. On a `C×H×W` tensor each
//! channel is one neuron, whose activation is the spatial mean of the
//! channel map. On any other tensor each element is one neuron.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{self, ConvGeometry, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOp {
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Marks the hand-off to a dense layer. Dense layers flatten their input
    /// anyway, so this never changes the neuron layout.
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// `weight: [out×in]`, `bias: [out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// `kernels: [K×C×kh×kw]`, `bias: [K]`.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub post: Vec<PostOp>,
}

impl Layer {
    pub fn dense(weight: Tensor, bias: Tensor, post: Vec<PostOp>) -> Self {
        Layer {
            kind: LayerKind::Dense { weight, bias },
            post,
        }
    }

    pub fn conv2d(
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        post: Vec<PostOp>,
    ) -> Self {
        Layer {
            kind: LayerKind::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            },
            post,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match &self.kind {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => bias,
        }
    }

    pub fn weight(&self) -> &Tensor {
        match &self.kind {
            LayerKind::Dense { weight, .. } => weight,
            LayerKind::Conv2d { kernels, .. } => kernels,
        }
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        match &mut self.kind {
            LayerKind::Dense { weight, bias } => (weight, bias),
            LayerKind::Conv2d { kernels, bias, .. } => (kernels, bias),
        }
    }

    /// Output of the linear part (before post-ops).
    pub(crate) fn linear(&self, input: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Dense { weight, bias } => tensor::dense(weight, bias, input),
            LayerKind::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => tensor::conv2d(input, kernels, bias, *stride, *padding),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronId {
    pub fn new(layer: usize, unit: usize) -> Self {
        NeuronId { layer, unit }
    }
}

/// Neurons whose outputs are forced to zero during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NeuronMask {
    ids: BTreeSet<NeuronId>,
}

impl NeuronMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NeuronId) -> bool {
        self.ids.insert(id)
    }

    pub fn contains(&self, id: NeuronId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.ids.iter().copied()
    }

    /// Every neuron of every coverage layer.
    pub fn all(model: &Model) -> Self {
        let mut mask = Self::new();
        for layer in 0..model.coverage_layer_count() {
            for unit in 0..model.neuron_count(layer) {
                mask.insert(NeuronId::new(layer, unit));
            }
        }
        mask
    }

    pub fn from_layer_sets(sets: &[Vec<usize>]) -> Self {
        let mut mask = Self::new();
        for (layer, units) in sets.iter().enumerate() {
            for &unit in units {
                mask.insert(NeuronId::new(layer, unit));
            }
        }
        mask
    }

    fn units_in(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .range(NeuronId::new(layer, 0)..NeuronId::new(layer + 1, 0))
            .map(|id| id.unit)
    }
}

impl FromIterator<NeuronId> for NeuronMask {
    fn from_iter<I: IntoIterator<Item = NeuronId>>(iter: I) -> Self {
        NeuronMask {
            ids: iter.into_iter().collect(),
        }
    }
}

/// Per-coverage-layer neuron activations for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<f32>>,
    /// Pre-softmax outputs.
    pub logits: Tensor,
    pub predicted: usize,
}

impl ActivationTrace {
    /// `g_f(x)`: the logit of the predicted class.
    pub fn logit(&self) -> f32 {
        self.logits.data()[self.predicted]
    }
}

#[derive(Debug, Clone)]
pub(crate) enum PostStage {
    Relu {
        input: Tensor,
    },
    MaxPool {
        input_shape: Vec<usize>,
        winners: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct LayerRecord {
    /// What the linear op consumed.
    pub input: Tensor,
    pub stages: Vec<PostStage>,
    /// Output after post-ops and masking.
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardPass {
    pub records: Vec<LayerRecord>,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        &self.records.last().expect("model has layers").output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    class_count: usize,
    content_hash: u64,
    input_neurons: bool,
    /// Output shape of every layer after its post-ops.
    output_shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidModel(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        let mut shape = input_shape.clone();
        let mut flattened = false;
        let mut output_shapes = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            shape = layer_output_shape(i, layer, &shape, flattened)?;
            flattened = layer.post.contains(&PostOp::Flatten);
            for t in [layer.weight(), layer.bias()] {
                if !t.is_finite() {
                    return Err(Error::InvalidModel(format!(
                        "layer {i} has non-finite parameters"
                    )));
                }
            }
            output_shapes.push(shape.clone());
        }
        let last = layers.last().expect("non-empty");
        if !matches!(last.kind, LayerKind::Dense { .. }) || shape.len() != 1 {
            return Err(Error::InvalidModel("the final layer must be dense".into()));
        }
        if !last.post.iter().all(|op| *op == PostOp::Flatten) {
            return Err(Error::InvalidModel(
                "the final layer must produce raw logits (no relu/pool)".into(),
            ));
        }
        let class_count = shape[0];
        if class_count < 2 {
            return Err(Error::InvalidModel(format!(
                "a classifier needs at least 2 classes, got {class_count}"
            )));
        }
        let mut model = Model {
            input_shape,
            layers,
            class_count,
            content_hash: 0,
            input_neurons: false,
            output_shapes,
        };
        model.content_hash = model.compute_hash();
        Ok(model)
    }

    /// Counts the raw input as coverage layer 0.
    pub fn with_input_neurons(mut self, include: bool) -> Self {
        self.input_neurons = include;
        self
    }

    pub fn input_neurons(&self) -> bool {
        self.input_neurons
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// FNV-1a digest over the architecture and every parameter byte.
    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    pub(crate) fn rehash(&mut self) {
        self.content_hash = self.compute_hash();
    }

    pub fn coverage_layer_count(&self) -> usize {
        self.layers.len() - 1 + usize::from(self.input_neurons)
    }

    /// Shape of the tensor a coverage layer's neurons live on.
    pub fn coverage_shape(&self, layer: usize) -> &[usize] {
        match self.site(layer) {
            Site::Input => &self.input_shape,
            Site::Layer(i) => &self.output_shapes[i],
        }
    }

    pub fn neuron_count(&self, layer: usize) -> usize {
        neurons_on(self.coverage_shape(layer))
    }

    pub fn total_neurons(&self) -> usize {
        (0..self.coverage_layer_count())
            .map(|l| self.neuron_count(l))
            .sum()
    }

    fn site(&self, layer: usize) -> Site {
        assert!(
            layer < self.coverage_layer_count(),
            "coverage layer {layer} out of range"
        );
        match (self.input_neurons, layer) {
            (true, 0) => Site::Input,
            (true, l) => Site::Layer(l - 1),
            (false, l) => Site::Layer(l),
        }
    }

    /// Coverage layer fed by network layer `i`'s output, if any.
    fn coverage_index_of_layer(&self, i: usize) -> Option<usize> {
        (i + 1 < self.layers.len()).then_some(i + usize::from(self.input_neurons))
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: self.input_shape.clone(),
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn check_mask(&self, mask: &NeuronMask) -> Result<()> {
        for id in mask.iter() {
            if id.layer >= self.coverage_layer_count() || id.unit >= self.neuron_count(id.layer) {
                return Err(Error::InvalidNeuron {
                    layer: id.layer,
                    unit: id.unit,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn forward_pass(
        &self,
        x: &Tensor,
        mask: Option<&NeuronMask>,
    ) -> Result<ForwardPass> {
        self.check_input(x)?;
        if let Some(mask) = mask {
            self.check_mask(mask)?;
        }
        let mut current = x.clone();
        if self.input_neurons {
            if let Some(mask) = mask {
                zero_units(&mut current, mask.units_in(0));
            }
        }
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = current;
            let mut out = layer.linear(&input)?;
            let mut stages = Vec::with_capacity(layer.post.len());
            for op in &layer.post {
                match *op {
                    PostOp::Relu => {
                        let relu_in = out;
                        out = tensor::relu(&relu_in);
                        stages.push(PostStage::Relu { input: relu_in });
                    }
                    PostOp::MaxPool { window, stride } => {
                        let (pooled, winners) =
                            tensor::maxpool2d_with_indices(&out, window, stride)?;
                        stages.push(PostStage::MaxPool {
                            input_shape: out.shape().to_vec(),
                            winners,
                        });
                        out = pooled;
                    }
                    PostOp::Flatten => {}
                }
            }
            if let (Some(mask), Some(cov)) = (mask, self.coverage_index_of_layer(i)) {
                zero_units(&mut out, mask.units_in(cov));
            }
            current = out.clone();
            records.push(LayerRecord {
                input,
                stages,
                output: out,
            });
        }
        Ok(ForwardPass { records })
    }

    /// Runs the network, zeroing masked neurons before the next layer
    /// consumes them, and records every coverage layer's activations.
    pub fn forward(&self, x: &Tensor, mask: Option<&NeuronMask>) -> Result<ActivationTrace> {
        let pass = self.forward_pass(x, mask)?;
        Ok(self.trace_from(&pass))
    }

    pub(crate) fn trace_from(&self, pass: &ForwardPass) -> ActivationTrace {
        let layers = (0..self.coverage_layer_count())
            .map(|l| {
                let t = match self.site(l) {
                    Site::Input => &pass.records[0].input,
                    Site::Layer(i) => &pass.records[i].output,
                };
                neuron_means(t)
            })
            .collect();
        let logits = pass.logits().clone();
        let predicted = logits.argmax();
        ActivationTrace {
            layers,
            logits,
            predicted,
        }
    }

    /// Predicted class and its logit.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f32)> {
        self.predict_masked(x, None)
    }

    pub fn predict_masked(&self, x: &Tensor, mask: Option<&NeuronMask>) -> Result<(usize, f32)> {
        let pass = self.forward_pass(x, mask)?;
        let logits = pass.logits();
        let class = logits.argmax();
        Ok((class, logits.data()[class]))
    }

    fn compute_hash(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write(b"NPCM\x01");
        h.write_u64(self.input_shape.len() as u64);
        for &e in &self.input_shape {
            h.write_u64(e as u64);
        }
        h.write_u64(self.layers.len() as u64);
        for layer in &self.layers {
            match &layer.kind {
                LayerKind::Dense { .. } => h.write(&[0]),
                LayerKind::Conv2d {
                    stride, padding, ..
                } => {
                    h.write(&[1]);
                    h.write_u64(*stride as u64);
                    h.write_u64(*padding as u64);
                }
            }
            h.write_u64(layer.post.len() as u64);
            for op in &layer.post {
                match op {
                    PostOp::Relu => h.write(&[0]),
                    PostOp::MaxPool { window, stride } => {
                        h.write(&[1]);
                        h.write_u64(*window as u64);
                        h.write_u64(*stride as u64);
                    }
                    PostOp::Flatten => h.write(&[2]),
                }
            }
            for t in [layer.weight(), layer.bias()] {
                h.write_u64(t.rank() as u64);
                for &e in t.shape() {
                    h.write_u64(e as u64);
                }
                for v in t.data() {
                    h.write(&v.to_le_bytes());
                }
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy)]
enum Site {
    Input,
    Layer(usize),
}

fn layer_output_shape(
    index: usize,
    layer: &Layer,
    input: &[usize],
    input_flattened: bool,
) -> Result<Vec<usize>> {
    let bad = |msg: alloc::string::String| Error::InvalidModel(format!("layer {index}: {msg}"));
    let mut shape = match &layer.kind {
        LayerKind::Dense { weight, bias } => {
            let (out_dim, in_dim) = tensor::dense_dims(weight, bias)?;
            let len: usize = input.iter().product();
            if len != in_dim {
                return Err(bad(format!(
                    "dense expects {in_dim} inputs, previous layer yields {input:?}"
                )));
            }
            vec![out_dim]
        }
        LayerKind::Conv2d {
            kernels,
            bias,
            stride,
            padding,
        } => {
            if input_flattened {
                return Err(bad("conv2d cannot follow a flatten".into()));
            }
            let geo = ConvGeometry::new(input, kernels.shape(), *stride, *padding)
                .map_err(|e| bad(format!("{e}")))?;
            if bias.shape() != [geo.out_channels] {
                return Err(bad(format!("bias shape {:?}", bias.shape())));
            }
            geo.output_shape().to_vec()
        }
    };
    for op in &layer.post {
        if let PostOp::MaxPool { window, stride } = *op {
            let probe = Tensor::zeros(&shape);
            let [c, h, w] =
                tensor::pool_input_dims(&probe, window, stride).map_err(|e| bad(format!("{e}")))?;
            shape = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
        }
    }
    Ok(shape)
}

pub(crate) fn neurons_on(shape: &[usize]) -> usize {
    if shape.len() == 3 {
        shape[0]
    } else {
        shape.iter().product()
    }
}

/// Neuron activations of a tensor: channel means on `C×H×W`, else elements.
pub(crate) fn neuron_means(t: &Tensor) -> Vec<f32> {
    if t.rank() == 3 {
        let plane = t.shape()[1] * t.shape()[2];
        t.data()
            .chunks(plane)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect()
    } else {
        t.data().to_vec()
    }
}

/// Sums of a tensor's values per neuron (channel sums on `C×H×W`).
pub(crate) fn neuron_sums(values: &[f64], shape: &[usize]) -> Vec<f64> {
    if shape.len() == 3 {
        let plane = shape[1] * shape[2];
        values.chunks(plane).map(|ch| ch.iter().sum()).collect()
    } else {
        values.to_vec()
    }
}

fn zero_units(t: &mut Tensor, units: impl Iterator<Item = usize>) {
    let plane = if t.rank() == 3 {
        t.shape()[1] * t.shape()[2]
    } else {
        1
    };
    let data = t.data_mut();
    for u in units {
        data[u * plane..(u + 1) * plane].fill(0.0);
    }
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
