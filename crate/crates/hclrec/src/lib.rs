//! Hierarchical contrastive learning with multiple augmentation for
//! sequential recommendation.
//!
//! The crate covers the full pipeline: interaction-log preprocessing
//! ([`corpus`]), the item co-occurrence similarity index ([`similarity`]),
//! sequence-level augmentation operators and multi-level view generation
//! ([`augment`]), a causal self-attention encoder with additional per-level
//! blocks and exact analytic gradients ([`model`]), the next-item and
//! level-wise contrastive losses ([`objective`]), the training loop
//! ([`train`]), and full-ranking evaluation ([`eval`]).

pub mod augment;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod rng;
pub mod similarity;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
