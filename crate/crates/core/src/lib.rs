//! Multi-modal movie rating prediction with a transformer fusion encoder.
//!
//! Structured MovieLens attributes, text embeddings and poster embeddings are
//! each turned into a token, stacked between trainable CLS and SEP tokens,
//! mixed by a multi-head self-attention encoder, and classified into the five
//! rating levels. The crate also carries the data tooling and the classic
//! neighbourhood and matrix-factorization baselines used for comparison.

pub mod baselines;
pub mod config;
pub mod data;
pub mod embed;
pub mod fusion;
pub mod init;
pub mod model;
pub mod tensor;
pub mod train;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Embed(#[from] embed::EmbedError),
    #[error(transparent)]
    Store(#[from] embed::StoreError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
