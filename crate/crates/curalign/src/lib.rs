//! Contrastive noun-region alignment with an ontology-driven sampling curriculum.
//!
//! The pipeline: generate or ingest an image-caption corpus, map caption nouns
//! to detected object classes by pointwise mutual information, group the
//! resulting (caption, noun, image) triplets under a two-level ontology, and
//! train a small cross-attention aligner whose minibatches are drawn from that
//! ontology. Sampling starts at the entity root (uniform over the corpus) and
//! shifts probability mass onto object nodes whenever held-out retrieval
//! accuracy clears a threshold, so minibatches become progressively harder to
//! tell apart.

pub mod aligner;
pub mod corpus;
pub mod manifest;
pub mod mat;
pub mod ontology;
pub mod retrieval;
pub mod sampler;
pub mod synth;
pub mod trainer;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("override maps {noun:?} to unknown object class {class:?}")]
    UnknownOverrideClass { noun: String, class: String },
    #[error("triplet {caption_id:?} references unknown image {image_id:?}")]
    UnknownImage { caption_id: String, image_id: String },
    #[error("ontology has no object nodes")]
    NoObjectNodes,
    #[error("degenerate distribution: all node probabilities are zero")]
    DegenerateDistribution,
    #[error("cannot sample from an empty dataset")]
    EmptyDataset,
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("recall cutoff {k} exceeds pool size {pool}")]
    CutoffExceedsPool { k: usize, pool: usize },
    #[error("no object class has at least {min} instances")]
    NoQualifyingClass { min: usize },
    #[error("non-finite loss at step {step} (minibatch from node {node:?})")]
    NonFiniteLoss { step: u64, node: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
