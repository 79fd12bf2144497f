//! Multi-objective supervised fine-tuning with component freezing.
//!
//! Each optimization step draws one target batch and one pervasiveness
//! batch, sums their answer-position cross entropies with weight lambda, and
//! applies a masked AdamW update: frozen components receive no parameter or
//! optimizer-state changes at all. Evenly spaced observation points per
//! epoch evaluate accuracies and run the circuit metrics, producing one
//! trajectory record each.

mod adamw;
mod freeze;
mod sft;

pub use adamw::{adamw_step, AdamwConfig, OptimState, StepOutcome};
pub use freeze::{make_freeze_mask, FreezeMask, LocalizationStrategy};
pub use sft::{
    evaluate, eval_loss, pretrain, sft_run, MetricHookConfig, PretrainConfig, PretrainReport,
    SftConfig, SftData, Trajectory, TrainMode,
};
