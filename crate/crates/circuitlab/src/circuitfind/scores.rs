//! Edge score maps, circuit extraction, and provenance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinyformer::{ComputationalGraph, Edge, MetricKind};

/// Intervention regime a score map or circuit was discovered under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Ns,
    Dn,
    NsDn,
}

/// Per-edge causal-effect scores over one computational graph.
///
/// Scores are stored signed as measured; `magnitude` is the causal effect
/// used everywhere ranking or distance is involved. The metadata range spans
/// the observed magnitudes.
#[derive(Clone, Debug)]
pub struct EdgeScores {
    graph_digest: String,
    regime: Regime,
    scores: BTreeMap<Edge, f64>,
    abs_min: f64,
    abs_max: f64,
}

impl EdgeScores {
    pub fn new(
        graph: &ComputationalGraph,
        regime: Regime,
        scores: BTreeMap<Edge, f64>,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidArgument("empty score map".into()));
        }
        for (e, s) in &scores {
            if !graph.contains_edge(e) {
                return Err(Error::InvalidArgument(format!(
                    "scored edge ({}, {}) not in graph",
                    e.0, e.1
                )));
            }
            if !s.is_finite() {
                return Err(Error::NonFinite { op: "edge_scores" });
            }
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in scores.values() {
            lo = lo.min(s.abs());
            hi = hi.max(s.abs());
        }
        Ok(EdgeScores {
            graph_digest: graph.digest().to_string(),
            regime,
            scores,
            abs_min: lo,
            abs_max: hi,
        })
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn graph_digest(&self) -> &str {
        &self.graph_digest
    }

    pub fn get(&self, e: &Edge) -> Option<f64> {
        self.scores.get(e).copied()
    }

    /// Causal-effect magnitude; edges without a score read as zero.
    pub fn magnitude(&self, e: &Edge) -> f64 {
        self.scores.get(e).map(|s| s.abs()).unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Edge, &f64)> {
        self.scores.iter()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(min, max)` of observed magnitudes.
    pub fn abs_range(&self) -> (f64, f64) {
        (self.abs_min, self.abs_max)
    }
}

/// How a circuit and its scores came to be; stored alongside every circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: String,
    pub config: String,
    pub graph_digest: String,
    pub dataset_digest: String,
    pub weight_digest: String,
}

/// Discovery configuration.
///
/// Exactly one of `tau` and `sparsity_target` drives circuit extraction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub regime: Regime,
    pub tau: Option<f64>,
    pub sparsity_target: Option<f64>,
    pub metric: MetricKind,
    pub batch_size: usize,
    pub seed: u64,
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.tau, self.sparsity_target) {
            (Some(t), None) => {
                if t < 0.0 {
                    return Err(Error::InvalidArgument("tau must be >= 0".into()));
                }
            }
            (None, Some(s)) => {
                if !(0.0..1.0).contains(&s) {
                    return Err(Error::InvalidArgument("sparsity target must be in [0, 1)".into()));
                }
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "exactly one of tau and sparsity_target must be set".into(),
                ))
            }
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "regime={:?} tau={:?} sparsity={:?} metric={:?} batch={} seed={}",
            self.regime, self.tau, self.sparsity_target, self.metric, self.batch_size, self.seed
        )
    }
}

/// An extracted circuit: a scored edge subset of one graph.
#[derive(Clone, Debug)]
pub struct Circuit {
    pub edges: BTreeMap<Edge, f64>,
    pub regime: Regime,
    pub provenance: Provenance,
}

impl Circuit {
    pub fn contains(&self, e: &Edge) -> bool {
        self.edges.contains_key(e)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edge_set(&self) -> std::collections::BTreeSet<Edge> {
        self.edges.keys().copied().collect()
    }
}

/// Retain edges above the threshold, or the top-k meeting the sparsity
/// target. Ties order by (magnitude desc, sender, receiver).
pub fn threshold_circuit(
    scores: &EdgeScores,
    config: &DiscoveryConfig,
    provenance: Provenance,
) -> Result<Circuit> {
    config.validate()?;
    let edges: BTreeMap<Edge, f64> = match (config.tau, config.sparsity_target) {
        (Some(tau), None) => scores
            .iter()
            .filter(|(_, s)| s.abs() > tau)
            .map(|(e, s)| (*e, *s))
            .collect(),
        (None, Some(s)) => {
            let keep = ((1.0 - s) * scores.len() as f64).floor() as usize;
            if keep == 0 {
                return Err(Error::InvalidArgument(format!(
                    "sparsity target {s} retains zero of {} edges",
                    scores.len()
                )));
            }
            let mut ranked: Vec<(Edge, f64)> = scores.iter().map(|(e, s)| (*e, *s)).collect();
            ranked.sort_by(|(ea, sa), (eb, sb)| {
                sb.abs()
                    .partial_cmp(&sa.abs())
                    .expect("scores are finite")
                    .then(ea.cmp(eb))
            });
            ranked.into_iter().take(keep).collect()
        }
        _ => unreachable!("validated above"),
    };
    Ok(Circuit { edges, regime: config.regime, provenance })
}

#[cfg(test)]
pub(crate) fn test_provenance(graph_digest: &str) -> Provenance {
    Provenance {
        algorithm: "test".into(),
        config: String::new(),
        graph_digest: graph_digest.to_string(),
        dataset_digest: String::new(),
        weight_digest: String::new(),
    }
}
