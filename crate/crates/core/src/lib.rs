//! Pipeline-parallel training of graph attention networks on a single host.
//!
//! Layers operate on `(node_ids, feats)` tuples so that a batch can be cut
//! into micro-batches and each graph layer can rebuild the sub-graph induced
//! by its micro-batch. [`pipeline::Pipeline`] runs a partitioned model over
//! simulated devices with a fill-drain schedule and accumulates gradients
//! into one optimizer step.

pub mod batching;
pub mod dataset;
pub mod error;
pub mod gat;
pub mod graph;
pub mod harness;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use batching::{split_mask, split_microbatches, SplitPlan, SplitStrategy};
pub use dataset::{load_dataset, write_dataset, Dataset};
pub use error::{Error, Result};
pub use gat::{GatLayer, HeadMode};
pub use graph::Graph;
pub use harness::{accuracy, benchmark, train, train_on, Mode, RunConfig, RunReport};
pub use model::{BatchTuple, GatModelConfig, Layer, LayerSeq, StepCtx};
pub use pipeline::{bubble_stats, partition_model, Pipeline, PipelineConfig, Timeline};
pub use rng::RngStream;
pub use tensor::Tensor2D;
