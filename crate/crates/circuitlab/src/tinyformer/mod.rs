//! A decoder-only transformer decomposed into named components.
//!
//! Every independent parameter matrix is a component: per-head `Wq`, `Wk`,
//! `Wv`, `Wo`, per-layer `Wup`, `Wdown`, plus the embedding and unembedding
//! tables. Components communicate over an additive residual stream; the
//! computational graph records exactly which writer feeds which reader, and
//! the forward pass can replace any single edge's contribution with a donor
//! activation (interchange patching) or blend it through a soft gate.
//!
//! Readers normalize their recomposed input after summation, so the cached
//! per-writer contributions always add up to the observed reader input.

mod component;
mod config;
mod graph;
mod metric;
mod model;
mod snapshot;

pub use component::{ComponentClass, ComponentId};
pub use config::ModelConfig;
pub use graph::{ComputationalGraph, Edge};
pub use metric::{metric_on_tape, output_metric, AnswerSpec, MetricKind};
pub use model::{
    ActivationCache, ForwardOptions, ForwardResult, PatchMode, PatchPlan, TapeForward,
    TinyTransformer, TokenBatch,
};
pub use snapshot::{read_snapshot, snapshot_bytes, write_snapshot};
