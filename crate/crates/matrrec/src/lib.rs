//! MaTrRec: a hybrid Mamba + Transformer next-item recommender, built
//! from scratch on a small reverse-mode autodiff core, together with its
//! data pipeline, trainer, ranking metrics, and experiment drivers.
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability, and the thin `matrrec` binary for the end-to-end CLI.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
