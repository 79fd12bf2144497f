//! Desk-scale laboratory for watching transformer task circuits evolve under
//! fine-tuning.
//!
//! The crate bundles everything the experiments need:
//!
//! - [`numcore`]: dense f64 tensors with reverse-mode autodiff on a tape,
//!   sized for a toy decoder-only transformer.
//! - [`tinyformer`]: the transformer itself, decomposed into named components
//!   over a residual stream with edge-level interchange patching.
//! - [`taskgen`]: procedural token tasks (induction, reversal, boolean
//!   expressions, modular arithmetic, ...) that come with paired corrupted
//!   inputs for activation patching.
//! - [`circuitfind`]: circuit discovery (greedy edge removal, first-order
//!   attribution, hard-concrete edge masks), logical gate classification and
//!   component localization.
//! - [`satcore`]: CNF encoding of logical circuits, a CDCL SAT solver and
//!   minimal UNSAT core extraction.
//! - [`circmetrics`]: circuit distance, circuit stability and the evolution
//!   state classifier.
//! - [`posttrain`]: the multi-objective SFT loop with AdamW and
//!   component-freezing localization strategies.
//!
//! Batch-level work (per-edge scoring, stability subsets, evaluation) is
//! data-parallel via rayon when the default `parallel` feature is enabled and
//! falls back to plain iterators without it.

pub mod circmetrics;
pub mod circuitfind;
pub mod error;
pub mod fixtures;
pub mod numcore;
pub mod par;
pub mod posttrain;
pub mod satcore;
pub mod taskgen;
pub mod tinyformer;
pub mod util;

pub use error::{Error, Result};
