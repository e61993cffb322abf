//! Decision-path coverage for feed-forward classifiers.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`lrp`] decomposes the predicted logit into per-neuron relevance.
//! 2. [`cdp`] keeps, per layer, the smallest set of most relevant neurons
//!    that explains an `alpha` fraction of the logit (a *critical path*).
//! 3. [`abstraction`] clusters the critical paths of training samples per
//!    predicted class and merges every cluster into a weighted abstract path.
//!    The collection of abstract paths is the [`abstraction::DecisionGraph`].
//! 4. [`coverage`] scores a test suite against the graph, either by path
//!    structure (SNPC) or by activation distance along the path (ANPC).
//!
//! [`comparators`] carries the neuron-level baselines (NC, KMNC, NBC) and
//! [`metrics`] the evaluation statistics. [`trainkit`] produces small fixture
//! networks and adversarial inputs.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, reports and
//! the command line live in the `npc` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod abstraction;
pub mod bitset;
pub mod cdp;
pub mod comparators;
pub mod coverage;
mod error;
pub mod fixture;
pub mod lrp;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainkit;

pub use error::{Error, Result};
pub use model::{ActivationTrace, Layer, LayerKind, Model, NeuronId, NeuronMask, PostOp};
pub use tensor::Tensor;
