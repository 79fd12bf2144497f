//! Localization strategies and freeze masks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::circuitfind::{localize_components, EdgeScores, Localization};
use crate::error::{Error, Result};
use crate::tinyformer::{ComponentClass, ComponentId, ComputationalGraph};
use crate::util::seeded_rng;

/// Which components stay trainable during SFT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum LocalizationStrategy {
    /// Full-parameter SFT, nothing frozen.
    Free,
    /// Unfreeze the top-`budget` components of the step-0 discovery scores.
    Mech { budget: usize },
    /// Unfreeze a uniformly sampled component set with the given per-class
    /// counts, mirroring the composition of the matched Mech run.
    Random { attn_count: usize, mlp_count: usize },
    /// Like Mech, but scored from a completed free-evolution run's final
    /// discovery snapshot.
    FutureMech { budget: usize },
}

impl LocalizationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            LocalizationStrategy::Free => "free",
            LocalizationStrategy::Mech { .. } => "mech",
            LocalizationStrategy::Random { .. } => "random",
            LocalizationStrategy::FutureMech { .. } => "future_mech",
        }
    }

    pub fn needs_scores(&self) -> bool {
        matches!(
            self,
            LocalizationStrategy::Mech { .. } | LocalizationStrategy::FutureMech { .. }
        )
    }
}

/// Components excluded from updates. Embedding and unembedding are never
/// frozen.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    frozen: BTreeSet<ComponentId>,
}

impl FreezeMask {
    pub fn empty() -> Self {
        FreezeMask::default()
    }

    pub fn new(frozen: impl IntoIterator<Item = ComponentId>) -> Result<Self> {
        let frozen: BTreeSet<ComponentId> = frozen.into_iter().collect();
        if frozen.iter().any(|c| !c.is_eligible()) {
            return Err(Error::InvalidArgument(
                "embedding and unembedding are never frozen".into(),
            ));
        }
        Ok(FreezeMask { frozen })
    }

    pub fn is_frozen(&self, id: &ComponentId) -> bool {
        self.frozen.contains(id)
    }

    pub fn frozen(&self) -> &BTreeSet<ComponentId> {
        &self.frozen
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }
}

/// Build the freeze mask for a strategy. Mech-style strategies freeze the
/// complement of the localized top-`budget` set; Random freezes the
/// complement of a seeded class-matched sample. The localization of the
/// unfrozen set is returned for ratio bookkeeping.
pub fn make_freeze_mask(
    strategy: &LocalizationStrategy,
    graph: &ComputationalGraph,
    scores: Option<&EdgeScores>,
    seed: u64,
) -> Result<(FreezeMask, Option<Localization>)> {
    let eligible: Vec<ComponentId> =
        graph.nodes().iter().filter(|c| c.is_eligible()).copied().collect();
    match strategy {
        LocalizationStrategy::Free => Ok((FreezeMask::empty(), None)),
        LocalizationStrategy::Mech { budget } | LocalizationStrategy::FutureMech { budget } => {
            let scores = scores.ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{} strategy requires discovery scores",
                    strategy.name()
                ))
            })?;
            let loc = localize_components(scores, *budget)?;
            let frozen = eligible.iter().filter(|c| !loc.components.contains(c)).copied();
            Ok((FreezeMask::new(frozen)?, Some(loc)))
        }
        LocalizationStrategy::Random { attn_count, mlp_count } => {
            let mut rng = seeded_rng(seed, "random_localization");
            let mut sample_class = |class: ComponentClass, n: usize| -> Result<Vec<ComponentId>> {
                let mut pool: Vec<ComponentId> =
                    eligible.iter().filter(|c| c.class() == class).copied().collect();
                if n > pool.len() {
                    return Err(Error::InvalidArgument(format!(
                        "budget {n} exceeds {} components of class {class:?}",
                        pool.len()
                    )));
                }
                pool.shuffle(&mut rng);
                pool.truncate(n);
                Ok(pool)
            };
            let mut selected: BTreeSet<ComponentId> =
                sample_class(ComponentClass::Attn, *attn_count)?.into_iter().collect();
            selected.extend(sample_class(ComponentClass::Mlp, *mlp_count)?);
            let mask =
                FreezeMask::new(eligible.iter().filter(|c| !selected.contains(c)).copied())?;
            let loc = Localization {
                attn_count: *attn_count,
                mlp_count: *mlp_count,
                components: selected,
            };
            Ok((mask, Some(loc)))
        }
    }
}
