//! Architecture search for sequential recommenders: a shared-weight
//! block supernet, beam search over pairwise feature interactions, and
//! width search over the aggregation MLP, all on one autodiff engine.

pub mod blocks;
pub mod config;
pub mod dice;
pub mod embed;
pub mod fairness;
pub mod head;
pub mod interactions;
pub mod manifest;
pub mod metrics;
pub mod schema;
pub mod search;
pub mod synth;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("schema: {0}")]
    Schema(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}
