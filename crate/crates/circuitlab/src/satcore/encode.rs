//! Allocation-conflict encoding of logical circuits.
//!
//! One Boolean variable per eligible component means "allocated to the
//! target task's update". The target circuit asserts its output nodes stay
//! functional: an AND-labeled in-edge requires its sender, OR-labeled
//! in-edges require at least one sender between them. ADDER edges simplify
//! to OR in the target circuit and to AND in pervasiveness circuits. Each
//! pervasiveness circuit contributes the mirrored formula over negated
//! component literals: what it requires must not be reallocated. Embedding
//! and unembedding carry no variable and read as always available.
//!
//! Compound alternatives inside an OR group go through auxiliary variables
//! (an equisatisfiable translation); their definition clauses are tagged so
//! conflict counting can ignore them.

use std::collections::{BTreeMap, BTreeSet};

use super::cnf::{ClauseOrigin, ClauseTag, CnfFormula};
use super::mus::minimal_unsat_core;
use super::solver::{solve, SatStatus};
use crate::circuitfind::{GateLabel, LogicalCircuit};
use crate::error::{Error, Result};
use crate::tinyformer::ComponentId;

/// Conjoin the target circuit's allocation formula with every pervasiveness
/// circuit's mirrored formula.
pub fn encode_conflict(
    target: &LogicalCircuit,
    pervasiveness: &[LogicalCircuit],
) -> Result<CnfFormula> {
    if target.is_empty() {
        return Err(Error::InvalidArgument("empty target circuit".into()));
    }
    for (i, p) in pervasiveness.iter().enumerate() {
        if p.graph_digest != target.graph_digest {
            return Err(Error::InvalidArgument(format!(
                "pervasiveness circuit {i} comes from a different component universe"
            )));
        }
    }

    let mut components: BTreeSet<ComponentId> = target.nodes();
    for p in pervasiveness {
        components.extend(p.nodes());
    }
    let eligible: Vec<ComponentId> =
        components.into_iter().filter(|c| c.is_eligible()).collect();
    let var_of: BTreeMap<ComponentId, i32> =
        eligible.iter().enumerate().map(|(i, c)| (*c, i as i32 + 1)).collect();
    let labels: Vec<String> = eligible.iter().map(|c| c.to_string()).collect();
    let mut cnf = CnfFormula::with_labels(eligible.len(), labels)?;

    CircuitEncoder::new(target, true, ClauseOrigin::Target, "target", &var_of)
        .assert_into(&mut cnf)?;
    for (i, p) in pervasiveness.iter().enumerate() {
        CircuitEncoder::new(
            p,
            false,
            ClauseOrigin::Pervasiveness(i),
            &format!("pervasiveness[{i}]"),
            &var_of,
        )
        .assert_into(&mut cnf)?;
    }
    Ok(cnf)
}

/// Circuit conflict: 0 when the conjunction is satisfiable, otherwise the
/// number of semantic (non-auxiliary) clauses in a deletion-minimal UNSAT
/// core.
pub fn circuit_conflict(
    target: &LogicalCircuit,
    pervasiveness: &[LogicalCircuit],
) -> Result<u32> {
    let cnf = encode_conflict(target, pervasiveness)?;
    if solve(&cnf, &[])?.status == SatStatus::Sat {
        return Ok(0);
    }
    let core = minimal_unsat_core(&cnf)?;
    Ok(core.iter().filter(|&&i| cnf.tags()[i].semantic()).count() as u32)
}

#[derive(Clone, Copy, PartialEq)]
enum Piece {
    Always,
    Lit(i32),
}

struct CircuitEncoder<'a> {
    positive: bool,
    origin: ClauseOrigin,
    prefix: String,
    var_of: &'a BTreeMap<ComponentId, i32>,
    /// Receiver -> (and-required senders, or-alternative senders), after
    /// ADDER simplification.
    groups: BTreeMap<ComponentId, (Vec<ComponentId>, Vec<ComponentId>)>,
    sinks: BTreeSet<ComponentId>,
    aux_of: BTreeMap<ComponentId, i32>,
    asserted: BTreeSet<ComponentId>,
}

impl<'a> CircuitEncoder<'a> {
    fn new(
        circuit: &LogicalCircuit,
        positive: bool,
        origin: ClauseOrigin,
        prefix: &str,
        var_of: &'a BTreeMap<ComponentId, i32>,
    ) -> Self {
        let mut groups: BTreeMap<ComponentId, (Vec<ComponentId>, Vec<ComponentId>)> =
            BTreeMap::new();
        for (receiver, senders) in circuit.labeled_in_edges() {
            let entry = groups.entry(receiver).or_default();
            for (sender, label) in senders {
                // ADDER simplifies to OR on the target side, AND on the
                // pervasiveness side
                let as_or = match label {
                    GateLabel::Or => true,
                    GateLabel::And => false,
                    GateLabel::Adder => positive,
                };
                if as_or {
                    entry.1.push(sender);
                } else {
                    entry.0.push(sender);
                }
            }
        }
        CircuitEncoder {
            positive,
            origin,
            prefix: prefix.to_string(),
            var_of,
            groups,
            sinks: circuit.sinks(),
            aux_of: BTreeMap::new(),
            asserted: BTreeSet::new(),
        }
    }

    fn lit(&self, node: &ComponentId) -> Piece {
        match self.var_of.get(node) {
            Some(&v) => Piece::Lit(if self.positive { v } else { -v }),
            None => Piece::Always,
        }
    }

    fn assert_into(mut self, cnf: &mut CnfFormula) -> Result<()> {
        for sink in self.sinks.clone() {
            self.assert_node(cnf, sink)?;
        }
        Ok(())
    }

    fn semantic_tag(&self, label: String) -> ClauseTag {
        ClauseTag { origin: self.origin.clone(), label }
    }

    /// Top-level conjunct: the node itself plus its gate over senders.
    fn assert_node(&mut self, cnf: &mut CnfFormula, node: ComponentId) -> Result<()> {
        if !self.asserted.insert(node) {
            return Ok(());
        }
        if let Piece::Lit(l) = self.lit(&node) {
            let tag = self.semantic_tag(format!("{}:{node}", self.prefix));
            cnf.push_clause(vec![l], tag)?;
        }
        let Some((ands, ors)) = self.groups.get(&node).cloned() else {
            return Ok(());
        };
        for child in ands {
            self.assert_node(cnf, child)?;
        }
        if !ors.is_empty() {
            let mut clause = Vec::new();
            let mut trivially_true = false;
            for child in ors {
                match self.piece(cnf, child)? {
                    Piece::Always => {
                        trivially_true = true;
                        break;
                    }
                    Piece::Lit(l) => clause.push(l),
                }
            }
            if !trivially_true {
                let tag = self.semantic_tag(format!("{}:{node}:or", self.prefix));
                cnf.push_clause(clause, tag)?;
            }
        }
        Ok(())
    }

    /// The node as a disjunct: a literal when it is a leaf, an auxiliary
    /// variable implying its subformula otherwise.
    fn piece(&mut self, cnf: &mut CnfFormula, node: ComponentId) -> Result<Piece> {
        let Some((ands, ors)) = self.groups.get(&node).cloned() else {
            return Ok(self.lit(&node));
        };
        if let Some(&a) = self.aux_of.get(&node) {
            return Ok(Piece::Lit(a));
        }
        let a = cnf.add_var(format!("f.{}.{node}", self.prefix));
        self.aux_of.insert(node, a);
        let aux_tag = ClauseTag {
            origin: ClauseOrigin::AuxDefinition,
            label: format!("{}:{node}:def", self.prefix),
        };
        if let Piece::Lit(l) = self.lit(&node) {
            cnf.push_clause(vec![-a, l], aux_tag.clone())?;
        }
        for child in ands {
            match self.piece(cnf, child)? {
                Piece::Always => {}
                Piece::Lit(l) => {
                    cnf.push_clause(vec![-a, l], aux_tag.clone())?;
                }
            }
        }
        if !ors.is_empty() {
            let mut clause = vec![-a];
            let mut trivially_true = false;
            for child in ors {
                match self.piece(cnf, child)? {
                    Piece::Always => {
                        trivially_true = true;
                        break;
                    }
                    Piece::Lit(l) => clause.push(l),
                }
            }
            if !trivially_true {
                cnf.push_clause(clause, aux_tag)?;
            }
        }
        Ok(Piece::Lit(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn comp(i: u32) -> ComponentId {
        ComponentId::Wup { layer: i }
    }

    fn sink() -> ComponentId {
        ComponentId::Unembed
    }

    fn circuit(
        and: &[(ComponentId, ComponentId)],
        or: &[(ComponentId, ComponentId)],
        adder: &[(ComponentId, ComponentId)],
    ) -> LogicalCircuit {
        LogicalCircuit {
            graph_digest: "fixture".into(),
            and_edges: and.iter().copied().collect(),
            or_edges: or.iter().copied().collect(),
            adder_edges: adder.iter().copied().collect(),
            receiver_summary: BTreeMap::new(),
        }
    }

    #[test]
    fn direct_contradiction_has_conflict_two() {
        let target = circuit(&[(comp(0), sink())], &[], &[]);
        let perv = circuit(&[(comp(0), sink())], &[], &[]);
        let cnf = encode_conflict(&target, &[perv.clone()]).unwrap();
        // the encoding forces x and not-x
        assert!(cnf.clauses().contains(&vec![1]));
        assert!(cnf.clauses().contains(&vec![-1]));
        assert_eq!(solve(&cnf, &[]).unwrap().status, SatStatus::Unsat);
        assert_eq!(circuit_conflict(&target, &[perv]).unwrap(), 2);
    }

    #[test]
    fn or_redundancy_resolves_the_conflict() {
        let target = circuit(&[], &[(comp(0), sink()), (comp(1), sink())], &[]);
        let perv = circuit(&[(comp(0), sink())], &[], &[]);
        assert_eq!(circuit_conflict(&target, &[perv]).unwrap(), 0);
    }

    #[test]
    fn disjoint_circuits_do_not_conflict() {
        let target = circuit(&[(comp(0), sink())], &[], &[]);
        let perv = circuit(&[(comp(5), sink())], &[], &[]);
        assert_eq!(circuit_conflict(&target, &[perv]).unwrap(), 0);
    }

    #[test]
    fn adder_simplification_sides() {
        // target ADDER edges act as OR alternatives
        let target = circuit(&[], &[], &[(comp(0), sink()), (comp(1), sink())]);
        // pervasiveness ADDER edges act as AND requirements
        let perv_one = circuit(&[], &[], &[(comp(0), sink())]);
        assert_eq!(circuit_conflict(&target, &[perv_one]).unwrap(), 0);

        let perv_both = circuit(&[], &[], &[(comp(0), sink()), (comp(1), sink())]);
        let cc = circuit_conflict(&target, &[perv_both]).unwrap();
        assert_eq!(cc, 3); // the OR clause plus both negated requirements
    }

    #[test]
    fn conflict_grows_with_shared_alternatives() {
        // target wants any one of k components, pervasiveness pins them all
        let mut last = 0;
        for k in 1..=5 {
            let or_edges: Vec<_> = (0..k).map(|i| (comp(i), sink())).collect();
            let and_edges = or_edges.clone();
            let target = circuit(&[], &or_edges, &[]);
            let perv = circuit(&and_edges, &[], &[]);
            let cc = circuit_conflict(&target, &[perv]).unwrap();
            assert_eq!(cc, k + 1, "cc at k={k}");
            assert!(cc > last);
            last = cc;
        }
    }

    #[test]
    fn extra_pervasiveness_never_reduces_conflict() {
        let target = circuit(&[], &[(comp(0), sink()), (comp(1), sink())], &[]);
        let p0 = circuit(&[(comp(0), sink())], &[], &[]);
        let p1 = circuit(&[(comp(1), sink())], &[], &[]);
        let with_one = circuit_conflict(&target, &[p0.clone()]).unwrap();
        let with_two = circuit_conflict(&target, &[p0, p1]).unwrap();
        assert!(with_two >= with_one);
        assert_eq!(with_one, 0);
        assert_eq!(with_two, 3);
    }

    #[test]
    fn nested_alternatives_use_auxiliary_variables() {
        // sink needs m or n; m needs c, n needs d
        let m = comp(10);
        let n = comp(11);
        let c = comp(12);
        let d = comp(13);
        let target = circuit(&[(c, m), (d, n)], &[(m, sink()), (n, sink())], &[]);

        // both branches blocked: conflict
        let perv = circuit(&[(c, sink()), (d, sink())], &[], &[]);
        let cnf = encode_conflict(&target, &[perv.clone()]).unwrap();
        assert!(cnf.num_vars() > 4, "auxiliary variables expected");
        assert_eq!(solve(&cnf, &[]).unwrap().status, SatStatus::Unsat);
        let cc = circuit_conflict(&target, &[perv]).unwrap();
        let core = minimal_unsat_core(&cnf).unwrap();
        assert!(
            (cc as usize) < core.len(),
            "aux definition clauses sit in the core but are not counted"
        );
        assert!(cc >= 2);

        // one branch released: satisfiable
        let perv = circuit(&[(c, sink())], &[], &[]);
        assert_eq!(circuit_conflict(&target, &[perv]).unwrap(), 0);
    }

    #[test]
    fn empty_target_and_mismatched_universe_are_errors() {
        let empty = circuit(&[], &[], &[]);
        let perv = circuit(&[(comp(0), sink())], &[], &[]);
        assert!(encode_conflict(&empty, &[perv.clone()]).is_err());

        let target = circuit(&[(comp(0), sink())], &[], &[]);
        let mut alien = perv;
        alien.graph_digest = "other".into();
        assert!(encode_conflict(&target, &[alien]).is_err());
    }

    #[test]
    fn eligible_components_only_get_variables() {
        let target = circuit(&[(comp(0), sink())], &[], &[]);
        let cnf = encode_conflict(&target, &[]).unwrap();
        // the unembedding sink carries no variable
        assert_eq!(cnf.num_vars(), 1);
        assert_eq!(cnf.var_labels(), &["wup.0".to_string()]);
        let sets: BTreeSet<Vec<i32>> = cnf.clauses().iter().cloned().collect();
        assert_eq!(sets, BTreeSet::from([vec![1]]));
    }
}
