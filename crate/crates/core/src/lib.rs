//! Neural oblivious decision ensembles.
//!
//! Differentiable oblivious decision trees whose split-feature choice and
//! routing are relaxed with entmax, stacked in densely connected layers and
//! trained end-to-end with gradient descent on tabular data.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors and a small reverse-mode tape.
//! * [`choice`]: softmax, sparsemax, α-entmax, Gumbel-softmax and the two-class gate.
//! * [`odt`]: one layer of differentiable oblivious trees.
//! * [`model`]: the dense multi-layer ensemble and its prediction head.
//! * [`data`]: CSV ingestion, quantile/LOO preprocessing, splits and batching.
//! * [`train`]: data-aware init, QHAdam, checkpoint averaging, grid search.
//! * [`analysis`]: sparse compiled inference, permutation importance, tree contributions.
//! * [`io`]: run configuration and the binary model file.

// `!(x > 0.0)` is the positivity check that also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod choice;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod odt;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{NodeError, Result};
pub use tensor::{Parameter, Tensor};

/// Random generator used everywhere a seed is accepted.
pub type NodeRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a `u64` seed.
pub fn rng_from_seed(seed: u64) -> NodeRng {
    use rand::SeedableRng;
    NodeRng::seed_from_u64(seed)
}
