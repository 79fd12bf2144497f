//! Masked AdamW.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::freeze::FreezeMask;
use crate::error::Result;
use crate::numcore::Tensor;
use crate::tinyformer::{ComponentId, TinyTransformer};

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamwConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment buffers per component plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    m: BTreeMap<ComponentId, Vec<f64>>,
    v: BTreeMap<ComponentId, Vec<f64>>,
    t: u64,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    #[cfg(test)]
    pub(crate) fn moment(&self, id: &ComponentId) -> Option<&Vec<f64>> {
        self.m.get(id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; the whole step was skipped and
    /// neither parameters nor optimizer state moved.
    SkippedNonFinite,
}

/// One AdamW step over the model's components. Frozen components and
/// components without a gradient entry are untouched, state included.
pub fn adamw_step(
    model: &mut TinyTransformer,
    grads: &BTreeMap<ComponentId, Tensor>,
    state: &mut OptimState,
    config: &AdamwConfig,
    mask: &FreezeMask,
) -> Result<StepOutcome> {
    let active: Vec<ComponentId> = grads
        .keys()
        .filter(|id| !mask.is_frozen(id))
        .copied()
        .collect();
    for id in &active {
        if grads[id].data().iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let bias1 = 1.0 - config.beta1.powf(t);
    let bias2 = 1.0 - config.beta2.powf(t);

    for id in &active {
        let g = grads[id].data();
        let m = state.m.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
        let theta = model.component_mut(id).data_mut();
        debug_assert_eq!(theta.len(), g.len());
        for i in 0..g.len() {
            theta[i] -= config.learning_rate * config.weight_decay * theta[i];
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(StepOutcome::Applied)
}
