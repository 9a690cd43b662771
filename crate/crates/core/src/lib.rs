//! A desk-scale implementation of an anchor-driven vision-language
//! connector. Visual anchors are picked from the [CLS] attention map of a
//! vision transformer by a progressive per-head top-k search, gathered from
//! the feature map, and used as cross-attention queries over the full map;
//! an MLP projector then maps the aggregate into the language-model
//! embedding width.
//!
//! Alongside the connector itself the crate carries its ablation family
//! (pooling, resampler variants, direct-in), a PCA/heatmap analysis
//! pipeline with an anchor/salience overlap metric, an analytic FLOP cost
//! model for the connector-induced prefill savings, hand-written backward
//! passes verified by finite differences, and byte-exact weight
//! checkpointing.

pub mod analysis;
pub mod baselines;
pub mod connector;
pub mod costmodel;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernel;
pub mod selector;

pub use error::{Error, Result};
