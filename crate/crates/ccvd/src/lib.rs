//! Continual customized video diffusion at desk scale.
//!
//! Sequential concept learning with low-rank adapters and layer-specific
//! tokens, relevance-weighted adapter aggregation at test time, and
//! region-conditioned multi-concept synthesis.

pub mod adapters;
pub mod aggregator;
pub mod backbone;
pub mod config;
pub mod engine;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod regions;
pub mod registry;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensorio;
pub mod text;
pub mod toykit;
pub mod trainer;
pub mod video;
