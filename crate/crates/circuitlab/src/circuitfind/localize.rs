//! Component localization from edge scores.

use std::collections::{BTreeMap, BTreeSet};

use super::scores::EdgeScores;
use crate::error::{Error, Result};
use crate::tinyformer::{ComponentClass, ComponentId};

/// A localized component set with its class composition, recorded so a
/// matched-budget random baseline can mirror the Attn:MLP ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub components: BTreeSet<ComponentId>,
    pub attn_count: usize,
    pub mlp_count: usize,
}

/// Top-n components by summed incident-edge score magnitude. Embedding and
/// unembedding are never eligible.
pub fn localize_components(scores: &EdgeScores, n: usize) -> Result<Localization> {
    let mut importance: BTreeMap<ComponentId, f64> = BTreeMap::new();
    for (edge, s) in scores.iter() {
        for c in [edge.0, edge.1] {
            if c.is_eligible() {
                *importance.entry(c).or_insert(0.0) += s.abs();
            }
        }
    }
    if n == 0 || n > importance.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {n} outside 1..={} eligible components",
            importance.len()
        )));
    }
    let mut ranked: Vec<(ComponentId, f64)> = importance.into_iter().collect();
    ranked.sort_by(|(ca, sa), (cb, sb)| {
        sb.partial_cmp(sa).expect("finite importances").then(ca.cmp(cb))
    });
    let components: BTreeSet<ComponentId> = ranked.into_iter().take(n).map(|(c, _)| c).collect();
    let attn_count = components.iter().filter(|c| c.class() == ComponentClass::Attn).count();
    let mlp_count = components.iter().filter(|c| c.class() == ComponentClass::Mlp).count();
    Ok(Localization { components, attn_count, mlp_count })
}
