//! Few-shot knowledge graph completion with relation-aware neighbor
//! encoding, pruned multi-negative sampling with negative attention, and a
//! first-order meta-learning loop.
//!
//! The pipeline is: build or load a [`kg::KnowledgeGraph`] with few-shot
//! [`kg::TaskSet`]s, pretrain TransE embeddings on the background graph,
//! meta-train with [`trainer::meta_train`], and score held-out relations
//! with [`eval::meta_test`].

pub mod autodiff;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kg;
pub mod linalg;
pub mod negsampling;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
