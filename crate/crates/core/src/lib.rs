//! Composed image retrieval on precomputed image/text embeddings.
//!
//! The crate is organised around the data flow of a retrieval experiment:
//!
//! - [`store`]: the CEM1 embedding container, triplet annotations and a
//!   synthetic task generator used by tests and demos.
//! - [`combiner`]: the image/text fusion network (convex combination plus a
//!   learned residual), its ablation variants and an exact backward pass.
//! - [`training`]: batch contrastive loss, AdamW and the early-stopping loop.
//! - [`retrieval`]: cosine top-K search and the Recall@K protocols.
//! - [`preprocess`]: aspect-ratio aware padding, resize and center crop.
//! - [`analysis`]: similarity distributions and target/non-target gap studies.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod combiner;
pub mod error;
pub mod preprocess;
pub mod retrieval;
pub mod store;
pub mod training;

mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;
