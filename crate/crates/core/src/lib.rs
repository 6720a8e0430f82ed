//! Dual-branch anomaly adapters with text-guided routing, operating on
//! precomputed vision and text embeddings.
//!
//! Each selected feature layer gets a normal adapter and an anomaly adapter.
//! Per image, the final-layer CLS token is compared to projected "normal" and
//! "anomalous" text embeddings; a temperature softmax over the two cosines
//! weights the branches, and the fused tokens
//! `w_n·A_n(f) + w_a·A_a(f) + f` are scored against the same prompts to give
//! a patch-level anomaly map and an image score.

pub mod adapter;
pub mod config;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod router;
pub mod synth;
pub mod tensor_store;
pub mod trainer;

pub use error::{Error, Result};
