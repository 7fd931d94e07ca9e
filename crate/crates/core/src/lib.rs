//! Return-prediction laboratory.
//!
//! A small reverse-mode autodiff engine, the model roster built on it
//! (OLS through Transformer), a trainer, a Monte Carlo panel simulator,
//! forecast evaluation statistics, decile backtests, and the staged
//! pipeline the `retlab` command line drives.

pub mod error;
pub mod backtest;
pub mod data;
pub mod eval;
pub mod grad;
pub mod models;
pub mod pipeline;
pub mod sim;
pub mod train;

pub use error::{Error, Result};

/// Derives an independent seed from `base` and a path of stream indices
/// (model index, repetition, ...) with the SplitMix64 finalizer.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
