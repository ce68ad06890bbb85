//! Knowledge-infused interpretable temporal-fusion forecasting.
//!
//! `lfit-core` is the pure computational half of the project: a small
//! reverse-mode autodiff engine, the gated building blocks of the network,
//! variable selection and interpretable attention, the assembled forecaster,
//! quantile training, dataset windowing, synthetic landslide series and
//! evaluation metrics. It needs only `alloc`; file formats, the CLI and
//! anything touching the OS live in the `lfit` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod model;
pub mod params;
pub mod scenario;
pub mod selection;
pub mod serialize;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{LfitError, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Seedable generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
