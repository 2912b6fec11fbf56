//! Nested progressive-inference Vision Transformer.
//!
//! A single set of full-width weights hosts a chain of prefix-sliced
//! subnetworks (fewer attention heads, narrower embeddings). Inference
//! starts in the smallest subnetwork and, when the prediction entropy is
//! still above a threshold, re-embeds the input at the next width, fuses
//! the previous round's tokens back in through a learnable projection,
//! and runs the wider subnetwork. Training optimizes all stages jointly.
//!
//! Modules:
//! - [`tensor`]: f32 storage / f64 accumulation autodiff core
//! - [`vit`]: prefix-sliceable ViT (configs, weights, forward, params)
//! - [`fusion`]: between-stage token fusion (projection + learnable alpha)
//! - [`train`]: joint / sandwich / stochastic training
//! - [`data`]: IDX ubyte ingestion and the synthetic difficulty-graded set
//! - [`infer`]: entropy-gated progressive inference, sweeps, reports
//! - [`cost`]: analytic MACs / parameter accounting
//! - [`checkpoint`]: manifest + blob serialization
//! - [`config`]: the JSON run-configuration schema

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod fusion;
pub mod infer;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};
