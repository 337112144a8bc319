use std::io;

use crate::templates::{Stage, TemplateFamily};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid vocabulary layout: {0}")]
    Layout(String),

    #[error("token id {id} outside vocabulary of size {total}")]
    TokenOutOfRange { id: u32, total: usize },

    #[error("tokenizer: {0}")]
    Tokenize(String),

    #[error("template: {0}")]
    Template(String),

    #[error("{family} is not trained at {stage}")]
    FamilyUnavailable { family: TemplateFamily, stage: Stage },

    #[error("model config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("diffusion: {0}")]
    Diffusion(String),

    #[error("decode: {0}")]
    Decode(String),

    #[error("merge: {0}")]
    Merge(String),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: file truncated")]
    Truncated,

    #[error("checkpoint: {0}")]
    Inconsistent(String),

    #[error("pipeline: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
