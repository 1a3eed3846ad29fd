//! Non-local RoI attention.
//!
//! Each of `N` region-of-interest feature maps (shape `D×H×W`) is enriched
//! with an attention-weighted mix of bottleneck embeddings of all the RoIs.
//! The crate provides the operator with an exact backward pass, a loop-level
//! reference implementation, finite-difference gradient checks, a synthetic
//! training task, a scaling benchmark, and the CLI/config/weights plumbing.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod operator;
pub mod ops;
pub mod prng;
pub mod tensor;
pub mod toy;
pub mod weights;

pub use error::{Error, Result};
pub use operator::{
    attention_weights, embed_g, nlroi_backward, nlroi_forward, nlroi_reference, relation_scores,
    DiagonalMask, ForwardCache, NlRoiConfig, NlRoiParams, Scaling,
};
pub use prng::Prng;
pub use tensor::Tensor;
