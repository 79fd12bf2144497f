//! Circuit discovery under noising and denoising interventions.
//!
//! Three discovery algorithms share one convention: an edge's score is the
//! (signed) effect its intervention has on the model output, and the causal
//! effect used for ranking, thresholding and distances is the score's
//! magnitude.
//!
//! - Noising (`Ns`) runs on clean inputs and patches corrupted activations
//!   in; it exposes edges whose clean value the output depends on (AND and
//!   ADDER behavior).
//! - Denoising (`Dn`) runs on corrupted inputs and patches clean activations
//!   in; it exposes edges whose restoration moves the output (OR and ADDER
//!   behavior).
//! - `NsDn` combines both and, intersected per edge set, separates the three
//!   gate types.

mod acdc;
mod batching;
mod edge_pruning;
mod eap;
mod exact;
mod gates;
mod localize;
mod scores;

pub use acdc::acdc;
pub use batching::{answer_specs, chunked, clean_batch, corrupted_batch, dataset_digest};
pub use eap::{eap, eap_ns_dn, EapOptions};
pub use edge_pruning::{edge_pruning, EdgePruningConfig};
pub use exact::exact_patch_scores;
pub use gates::{classify_gates, GateLabel, LogicalCircuit};
pub use localize::{localize_components, Localization};
pub use scores::{threshold_circuit, Circuit, DiscoveryConfig, EdgeScores, Provenance, Regime};
