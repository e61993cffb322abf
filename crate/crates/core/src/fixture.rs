//! Seeded toy datasets and networks.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::Model;
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::trainkit::{
    train_sgd, Architecture, LabeledDataset, LayerPlan, TrainConfig, TrainOutcome,
};
use crate::Result;

/// Isotropic Gaussian blobs inside the unit cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub dims: usize,
    pub classes: usize,
    pub per_class: usize,
    /// Standard deviation of every blob.
    pub spread: f32,
    /// Minimum distance between class centres.
    pub separation: f32,
}

impl BlobSpec {
    pub fn new(dims: usize, classes: usize, per_class: usize) -> Self {
        BlobSpec {
            dims,
            classes,
            per_class,
            spread: 0.08,
            separation: 0.35,
        }
    }
}

/// Class centres for `spec`, drawn by rejection sampling in `[0.2, 0.8]^d`.
pub fn blob_centres(spec: &BlobSpec, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = Stream::Dataset.rng_indexed(seed, 0);
    let mut centres: Vec<Vec<f32>> = Vec::with_capacity(spec.classes);
    let mut min_sep = spec.separation;
    let mut attempts = 0usize;
    while centres.len() < spec.classes {
        let c: Vec<f32> = (0..spec.dims).map(|_| rng.random_range(0.2..0.8)).collect();
        let ok = centres.iter().all(|o| {
            let d2: f32 = o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= min_sep * min_sep
        });
        if ok {
            centres.push(c);
        }
        attempts += 1;
        if attempts.is_multiple_of(10_000) {
            min_sep *= 0.9;
        }
    }
    centres
}

/// Samples interleaved by class (`0, 1, .., C-1, 0, 1, ..`), clipped to `[0, 1]`.
pub fn blobs(spec: &BlobSpec, seed: u64) -> LabeledDataset {
    blobs_split(spec, seed, 1)
}

/// Like [`blobs`] but draws from sample stream `split`, so a test set can
/// share the centres of a training set without sharing its points.
pub fn blobs_split(spec: &BlobSpec, seed: u64, split: u64) -> LabeledDataset {
    let centres = blob_centres(spec, seed);
    let mut rng = Stream::Dataset.rng_indexed(seed, split);
    let noise = Normal::new(0.0f32, spec.spread).expect("spread is finite and positive");
    let mut inputs = Vec::with_capacity(spec.per_class * spec.classes);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for _ in 0..spec.per_class {
        for (class, c) in centres.iter().enumerate() {
            let x = c
                .iter()
                .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            inputs.push(Tensor::vector(x));
            labels.push(class);
        }
    }
    LabeledDataset::new(inputs, labels).expect("uniform shapes")
}

/// Randomly initialised relu MLP with the given layer widths.
pub fn mlp(widths: &[usize], seed: u64) -> Model {
    Architecture::mlp(widths).init(seed).expect("valid mlp")
}

/// `1×8×8` input, one 8-kernel 3×3 conv with relu and 2×2 pooling, a
/// 16-unit dense layer and 3 outputs. Random weights with small positive
/// biases so that most channels are alive.
pub fn small_cnn(seed: u64) -> Model {
    let arch = Architecture {
        input_shape: vec![1, 8, 8],
        layers: vec![
            LayerPlan::Conv2d {
                kernels: 8,
                size: 3,
                stride: 1,
                padding: 1,
                relu: true,
                pool: Some((2, 2)),
            },
            LayerPlan::Dense {
                units: 16,
                relu: true,
            },
            LayerPlan::Dense {
                units: 3,
                relu: false,
            },
        ],
    };
    let mut model = arch.init(seed).expect("valid cnn");
    for layer in model.layers_mut() {
        let (_, bias) = layer.params_mut();
        bias.data_mut().fill(0.05);
    }
    model.rehash();
    model
}

/// Trained network plus the train/test sets it was trained on.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub model: Model,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub blobs: BlobSpec,
    pub test_per_class: usize,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl FixtureConfig {
    /// `dims`-H-H-`classes` relu network on blobs; `2-16-16-3` for the defaults.
    pub fn blobs(dims: usize, classes: usize, seed: u64) -> Self {
        let per_class = 500usize.div_ceil(classes);
        FixtureConfig {
            blobs: BlobSpec::new(dims, classes, per_class),
            test_per_class: 1000usize.div_ceil(classes),
            hidden: vec![16, 16],
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 60,
                batch_size: 16,
                seed,
            },
        }
    }
}

pub fn build_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    let seed = cfg.train.seed;
    let train = blobs_split(&cfg.blobs, seed, 1);
    let test = blobs_split(
        &BlobSpec {
            per_class: cfg.test_per_class,
            ..cfg.blobs
        },
        seed,
        2,
    );
    let mut widths = vec![cfg.blobs.dims];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(cfg.blobs.classes);
    let TrainOutcome {
        model,
        train_accuracy,
        ..
    } = train_sgd(&Architecture::mlp(&widths), &train, &cfg.train)?;
    Ok(Fixture {
        model,
        train,
        test,
        train_accuracy,
    })
}
