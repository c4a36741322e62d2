//! Visual grounding on a synthetic shapes benchmark.
//!
//! The model is a frozen CLIP-style dual encoder with trainable
//! query-adaptation adapters grafted between its layers, a referential-query
//! decoder with language-guided multi-level fusion, and bipartite-matched
//! detection/segmentation losses. Everything runs on a from-scratch tensor
//! engine with reverse-mode differentiation so gradients can be audited
//! against finite differences.

pub mod scalar;
pub mod rng;
pub mod tensor;
pub mod params;
pub mod nn;
pub mod boxes;
pub mod hungarian;
pub mod losses;
pub mod config;
pub mod data;
pub mod backbone;
pub mod adapter;
pub mod decoder;
pub mod model;
pub mod train;
pub mod checkpoint;
