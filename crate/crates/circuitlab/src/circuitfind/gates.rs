//! Logical gate classification from the two intervention directions.
//!
//! Noising recovers edges with AND and ADDER behavior, denoising recovers OR
//! and ADDER, so set relations between the two circuits separate the three:
//! AND edges appear only under noising, OR edges only under denoising, and
//! ADDER edges under both.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::scores::Circuit;
use crate::error::{Error, Result};
use crate::tinyformer::{ComponentId, Edge};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateLabel {
    And,
    Or,
    Adder,
}

/// Edge-level gate labels plus a per-receiver summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LogicalCircuit {
    pub graph_digest: String,
    pub and_edges: BTreeSet<Edge>,
    pub or_edges: BTreeSet<Edge>,
    pub adder_edges: BTreeSet<Edge>,
    /// Majority gate label over each receiver's in-circuit edges; ties
    /// resolve ADDER over AND over OR.
    pub receiver_summary: BTreeMap<ComponentId, GateLabel>,
}

impl LogicalCircuit {
    pub fn edge_label(&self, e: &Edge) -> Option<GateLabel> {
        if self.and_edges.contains(e) {
            Some(GateLabel::And)
        } else if self.or_edges.contains(e) {
            Some(GateLabel::Or)
        } else if self.adder_edges.contains(e) {
            Some(GateLabel::Adder)
        } else {
            None
        }
    }

    /// All labeled edges.
    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.and_edges.iter().chain(&self.or_edges).chain(&self.adder_edges)
    }

    pub fn len(&self) -> usize {
        self.and_edges.len() + self.or_edges.len() + self.adder_edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every component touched by a labeled edge.
    pub fn nodes(&self) -> BTreeSet<ComponentId> {
        self.edges().flat_map(|(s, r)| [*s, *r]).collect()
    }

    /// In-circuit senders of each receiver, with their edge labels.
    pub fn labeled_in_edges(&self) -> BTreeMap<ComponentId, Vec<(ComponentId, GateLabel)>> {
        let mut out: BTreeMap<ComponentId, Vec<(ComponentId, GateLabel)>> = BTreeMap::new();
        for e in self.edges() {
            out.entry(e.1).or_default().push((e.0, self.edge_label(e).unwrap()));
        }
        for v in out.values_mut() {
            v.sort();
        }
        out
    }

    /// Circuit nodes with no outgoing labeled edge (the output side).
    pub fn sinks(&self) -> BTreeSet<ComponentId> {
        let senders: BTreeSet<ComponentId> = self.edges().map(|(s, _)| *s).collect();
        self.nodes().into_iter().filter(|n| !senders.contains(n)).collect()
    }
}

/// Classify edges by their membership in the noising and denoising circuits.
pub fn classify_gates(c_ns: &Circuit, c_dn: &Circuit) -> Result<LogicalCircuit> {
    if c_ns.provenance.graph_digest != c_dn.provenance.graph_digest {
        return Err(Error::InvalidArgument(
            "circuits come from different graphs".into(),
        ));
    }
    let ns = c_ns.edge_set();
    let dn = c_dn.edge_set();
    let and_edges: BTreeSet<Edge> = ns.difference(&dn).copied().collect();
    let or_edges: BTreeSet<Edge> = dn.difference(&ns).copied().collect();
    let adder_edges: BTreeSet<Edge> = ns.intersection(&dn).copied().collect();

    let mut receiver_summary = BTreeMap::new();
    let mut per_receiver: BTreeMap<ComponentId, [usize; 3]> = BTreeMap::new();
    for (set, idx) in [(&and_edges, 0usize), (&or_edges, 1), (&adder_edges, 2)] {
        for (_, r) in set.iter() {
            per_receiver.entry(*r).or_default()[idx] += 1;
        }
    }
    for (r, counts) in per_receiver {
        let [and_n, or_n, adder_n] = counts;
        // ADDER wins ties, then AND
        let label = if adder_n >= and_n && adder_n >= or_n {
            GateLabel::Adder
        } else if and_n >= or_n {
            GateLabel::And
        } else {
            GateLabel::Or
        };
        receiver_summary.insert(r, label);
    }

    Ok(LogicalCircuit {
        graph_digest: c_ns.provenance.graph_digest.clone(),
        and_edges,
        or_edges,
        adder_edges,
        receiver_summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuitfind::scores::{test_provenance, Provenance, Regime};

    fn circuit(edges: &[Edge], regime: Regime, digest: &str) -> Circuit {
        Circuit {
            edges: edges.iter().map(|e| (*e, 1.0)).collect(),
            regime,
            provenance: Provenance { graph_digest: digest.into(), ..test_provenance(digest) },
        }
    }

    fn e(l: u32) -> Edge {
        (ComponentId::Wup { layer: l }, ComponentId::Wdown { layer: l })
    }

    #[test]
    fn set_relations() {
        // C_Ns = {e1, e2}, C_Dn = {e2, e3}: AND {e1}, OR {e3}, ADDER {e2}
        let ns = circuit(&[e(1), e(2)], Regime::Ns, "g");
        let dn = circuit(&[e(2), e(3)], Regime::Dn, "g");
        let lc = classify_gates(&ns, &dn).unwrap();
        assert_eq!(lc.and_edges, [e(1)].into());
        assert_eq!(lc.or_edges, [e(3)].into());
        assert_eq!(lc.adder_edges, [e(2)].into());
    }

    #[test]
    fn identical_circuits_are_all_adder() {
        let ns = circuit(&[e(1), e(2)], Regime::Ns, "g");
        let dn = circuit(&[e(1), e(2)], Regime::Dn, "g");
        let lc = classify_gates(&ns, &dn).unwrap();
        assert!(lc.and_edges.is_empty());
        assert!(lc.or_edges.is_empty());
        assert_eq!(lc.adder_edges.len(), 2);
    }

    #[test]
    fn disjoint_circuits_have_no_adder() {
        let ns = circuit(&[e(1)], Regime::Ns, "g");
        let dn = circuit(&[e(2)], Regime::Dn, "g");
        let lc = classify_gates(&ns, &dn).unwrap();
        assert!(lc.adder_edges.is_empty());
        assert_eq!(lc.len(), 2);
    }

    #[test]
    fn graph_mismatch_is_an_error() {
        let ns = circuit(&[e(1)], Regime::Ns, "g1");
        let dn = circuit(&[e(1)], Regime::Dn, "g2");
        assert!(classify_gates(&ns, &dn).is_err());
    }

    #[test]
    fn union_is_partitioned() {
        let ns = circuit(&[e(0), e(1), e(2)], Regime::Ns, "g");
        let dn = circuit(&[e(1), e(3)], Regime::Dn, "g");
        let lc = classify_gates(&ns, &dn).unwrap();
        let union: BTreeSet<Edge> = ns.edge_set().union(&dn.edge_set()).copied().collect();
        let labeled: BTreeSet<Edge> = lc.edges().copied().collect();
        assert_eq!(union, labeled);
        assert!(lc.and_edges.is_disjoint(&lc.or_edges));
        assert!(lc.and_edges.is_disjoint(&lc.adder_edges));
        assert!(lc.or_edges.is_disjoint(&lc.adder_edges));
    }
}
