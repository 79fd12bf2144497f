//! Hand-built diagnostic networks with known ground truth.
//!
//! These exist so discovery and classification can be checked against
//! planted structure: a scalar gate network whose receivers compute min, max
//! and sum of their senders, and transformer builders arranged to be affine
//! or to have a unique signal path.

use std::collections::BTreeMap;

use crate::circuitfind::{EdgeScores, Regime};
use crate::error::Result;
use crate::tinyformer::{
    ComponentId, ComputationalGraph, Edge, ModelConfig, TinyTransformer,
};

/// A six-node scalar network: two input writers `U`, `V` feed three
/// receivers computing `min` (AND-like), `max` (OR-like) and `sum`
/// (ADDER-like), which add into one output node.
///
/// Active inputs carry 1.0, ablated inputs 0.0, so interventions move nodes
/// between the binary activation states directly.
pub struct GateNetwork {
    graph: ComputationalGraph,
}

impl GateNetwork {
    pub const U: ComponentId = ComponentId::Wq { layer: 0, head: 0 };
    pub const V: ComponentId = ComponentId::Wk { layer: 0, head: 0 };
    pub const MIN: ComponentId = ComponentId::Wup { layer: 0 };
    pub const MAX: ComponentId = ComponentId::Wup { layer: 1 };
    pub const SUM: ComponentId = ComponentId::Wup { layer: 2 };
    pub const OUT: ComponentId = ComponentId::Unembed;

    pub fn new() -> Result<Self> {
        let nodes = vec![Self::U, Self::V, Self::MIN, Self::MAX, Self::SUM, Self::OUT];
        let mut edges = Vec::new();
        for receiver in [Self::MIN, Self::MAX, Self::SUM] {
            edges.push((Self::U, receiver));
            edges.push((Self::V, receiver));
            edges.push((receiver, Self::OUT));
        }
        Ok(GateNetwork { graph: ComputationalGraph::custom(nodes, edges)? })
    }

    pub fn graph(&self) -> &ComputationalGraph {
        &self.graph
    }

    /// Node values of an unpatched run on the given input pair.
    pub fn run_values(&self, input: (f64, f64)) -> BTreeMap<ComponentId, f64> {
        let (u, v) = input;
        let mut m = BTreeMap::new();
        m.insert(Self::U, u);
        m.insert(Self::V, v);
        m.insert(Self::MIN, u.min(v));
        m.insert(Self::MAX, u.max(v));
        m.insert(Self::SUM, u + v);
        m
    }

    /// Output value with per-edge sender substitutions applied.
    pub fn eval(&self, input: (f64, f64), patches: &BTreeMap<Edge, f64>) -> f64 {
        let (u, v) = input;
        let read = |sender: ComponentId, receiver: ComponentId, live: f64| -> f64 {
            patches.get(&(sender, receiver)).copied().unwrap_or(live)
        };
        let m = read(Self::U, Self::MIN, u).min(read(Self::V, Self::MIN, v));
        let x = read(Self::U, Self::MAX, u).max(read(Self::V, Self::MAX, v));
        let s = read(Self::U, Self::SUM, u) + read(Self::V, Self::SUM, v);
        read(Self::MIN, Self::OUT, m) + read(Self::MAX, Self::OUT, x) + read(Self::SUM, Self::OUT, s)
    }

    /// Per-edge exact interventions for one regime, on the all-active clean
    /// input (1, 1) against the all-ablated corrupted input (0, 0).
    pub fn exact_scores(&self, regime: Regime) -> Result<EdgeScores> {
        let clean = (1.0, 1.0);
        let corrupted = (0.0, 0.0);
        let side = |base: (f64, f64), donor_input: (f64, f64)| -> BTreeMap<Edge, f64> {
            let donor = self.run_values(donor_input);
            let reference = self.eval(base, &BTreeMap::new());
            self.graph
                .edges()
                .iter()
                .map(|e| {
                    let patch: BTreeMap<Edge, f64> = [(*e, donor[&e.0])].into();
                    (*e, self.eval(base, &patch) - reference)
                })
                .collect()
        };
        let scores = match regime {
            Regime::Ns => side(clean, corrupted),
            Regime::Dn => side(corrupted, clean),
            Regime::NsDn => {
                let ns = side(clean, corrupted);
                let dn = side(corrupted, clean);
                ns.into_iter().map(|(e, s)| (e, s + dn[&e])).collect()
            }
        };
        EdgeScores::new(&self.graph, regime, scores)
    }

    /// The gate labels the construction plants.
    pub fn planted_labels(
    ) -> (Vec<Edge>, Vec<Edge>, Vec<Edge>) {
        let and = vec![(Self::U, Self::MIN), (Self::V, Self::MIN)];
        let or = vec![(Self::U, Self::MAX), (Self::V, Self::MAX)];
        let adder = vec![
            (Self::U, Self::SUM),
            (Self::V, Self::SUM),
            (Self::MIN, Self::OUT),
            (Self::MAX, Self::OUT),
            (Self::SUM, Self::OUT),
        ];
        (and, or, adder)
    }
}

/// A transformer that is affine from every edge activation to its logits:
/// layer norm disabled, and `Wq`, `Wk`, `Wup` zeroed so attention mixes with
/// constant (uniform causal) weights and the MLP path is constant.
pub fn affine_model(config: ModelConfig) -> Result<TinyTransformer> {
    let mut model = TinyTransformer::new(config)?;
    model.set_layer_norm_enabled(false);
    for id in model.graph().nodes().to_vec() {
        let zero = matches!(
            id,
            ComponentId::Wq { .. } | ComponentId::Wk { .. } | ComponentId::Wup { .. }
        );
        if zero {
            for w in model.component_mut(&id).data_mut() {
                *w = 0.0;
            }
        }
    }
    Ok(model)
}

/// The twelve-edge single-layer single-head model used by greedy-search
/// replay fixtures.
pub fn tiny_fixture_model(init_seed: u64) -> Result<TinyTransformer> {
    TinyTransformer::new(ModelConfig {
        n_layers: 1,
        n_heads: 1,
        d_model: 8,
        d_ff: 8,
        vocab_size: 12,
        max_seq_len: 8,
        init_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_network_arithmetic() {
        let net = GateNetwork::new().unwrap();
        assert_eq!(net.graph().num_edges(), 9);
        // clean run: min 1, max 1, sum 2 -> output 4
        assert_eq!(net.eval((1.0, 1.0), &BTreeMap::new()), 4.0);
        assert_eq!(net.eval((0.0, 0.0), &BTreeMap::new()), 0.0);
    }

    #[test]
    fn noising_misses_the_redundant_or_path() {
        let net = GateNetwork::new().unwrap();
        let ns = net.exact_scores(Regime::Ns).unwrap();
        // ablating one max input leaves the other holding the gate open
        assert_eq!(ns.magnitude(&(GateNetwork::U, GateNetwork::MAX)), 0.0);
        assert_eq!(ns.magnitude(&(GateNetwork::V, GateNetwork::MAX)), 0.0);
        // min and sum inputs matter
        assert!(ns.magnitude(&(GateNetwork::U, GateNetwork::MIN)) > 0.0);
        assert!(ns.magnitude(&(GateNetwork::U, GateNetwork::SUM)) > 0.0);
    }

    #[test]
    fn denoising_misses_the_and_path() {
        let net = GateNetwork::new().unwrap();
        let dn = net.exact_scores(Regime::Dn).unwrap();
        // restoring one min input cannot open the AND gate alone
        assert_eq!(dn.magnitude(&(GateNetwork::U, GateNetwork::MIN)), 0.0);
        assert!(dn.magnitude(&(GateNetwork::U, GateNetwork::MAX)) > 0.0);
        assert!(dn.magnitude(&(GateNetwork::V, GateNetwork::SUM)) > 0.0);
    }
}
