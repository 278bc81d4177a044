use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("missing dataset file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("node id {id} out of range for {n} nodes ({context})")]
    NodeOutOfRange { id: i64, n: usize, context: String },

    #[error("label {label} of node {node} is not below num_classes = {num_classes}")]
    LabelOutOfRange {
        node: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("node {node} belongs to more than one of the train/val/test masks")]
    OverlappingMasks { node: usize },

    #[error("node {node} is in a split mask but has no label")]
    UnlabeledMaskedNode { node: usize },

    #[error("feature row {row} has {got} columns, expected {expected}")]
    RaggedFeatures {
        row: usize,
        got: usize,
        expected: usize,
    },

    #[error("invalid node set: {0}")]
    InvalidNodeSet(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("parts do not partition the node set: {0}")]
    NotAPartition(String),

    #[error("probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("mask selects no rows")]
    EmptyMask,

    #[error("chunks = {chunks} invalid for a batch of {n} nodes")]
    InvalidChunks { chunks: usize, n: usize },

    #[error("invalid balance {balance:?}: {reason}")]
    InvalidBalance { balance: Vec<usize>, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("forward pass is not deterministic (loss {first} then {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("worker for device {device} failed: {msg}")]
    Worker { device: usize, msg: String },

    #[error("non-finite loss at epoch {epoch}: {diagnostic}")]
    NonFiniteLoss { epoch: usize, diagnostic: String },

    #[error("timeline has no events")]
    EmptyTimeline,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by bad input (configuration or dataset
    /// contents) as opposed to failures during execution.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::Parse { .. }
                | Error::NodeOutOfRange { .. }
                | Error::LabelOutOfRange { .. }
                | Error::OverlappingMasks { .. }
                | Error::UnlabeledMaskedNode { .. }
                | Error::RaggedFeatures { .. }
                | Error::InvalidNodeSet(_)
                | Error::InvalidGraph(_)
                | Error::NotAPartition(_)
                | Error::InvalidProbability(_)
                | Error::InvalidChunks { .. }
                | Error::InvalidBalance { .. }
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
