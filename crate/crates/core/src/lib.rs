//! DomainGCN: weakly-supervised graph classification of whole-slide images.
//!
//! Patch tables become spatial k-NN graphs; a residual softmax-aggregation
//! message-passing network with domain-knowledge node weights and global
//! attention pooling predicts a slide-level label. Training and evaluation run
//! under stratified cross-validation, and a synthetic planted-signal generator
//! provides a verifiable stand-in dataset.

pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
