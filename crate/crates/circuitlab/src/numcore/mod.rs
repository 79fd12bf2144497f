//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The primitive set is exactly what a small decoder-only transformer and
//! differentiable edge masks need: matrix products, elementwise arithmetic,
//! row softmax, layer norm, gelu, embedding lookup, causal masking, and the
//! two scalar losses (cross entropy, KL divergence). Everything is 64-bit so
//! gradients can be verified against central finite differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, PrimKind, Tape, ValueId};
pub use tensor::Tensor;

/// Epsilon inside the layer-norm variance root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive constant used to suppress masked attention scores. Finite by
/// design: the tensor invariant rejects infinities, and exp(-1e30) underflows
/// to zero in the following softmax anyway.
pub const CAUSAL_MASK_VALUE: f64 = -1e30;
