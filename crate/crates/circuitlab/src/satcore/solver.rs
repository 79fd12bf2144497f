//! CDCL SAT solver with two watched literals.
//!
//! Branching is fixed to the lowest-index unassigned variable, positive
//! polarity first, so runs are deterministic. Conflicts learn a first-UIP
//! clause and backjump; there are no restarts and no clause deletion, which
//! is fine at the formula sizes circuit conflict produces.

use serde::{Deserialize, Serialize};

use super::cnf::CnfFormula;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SatStatus {
    Sat,
    Unsat,
}

#[derive(Clone, Debug)]
pub struct SatResult {
    pub status: SatStatus,
    /// A satisfying assignment indexed by variable (var `v` at `v - 1`).
    pub assignment: Option<Vec<bool>>,
    /// Clause indices of a deletion-minimal unsatisfiable core, when
    /// requested via [`solve_with_core`].
    pub core: Option<Vec<usize>>,
}

/// Decide satisfiability. Assumptions, when given, are enforced as extra
/// unit clauses on a scratch copy of the formula.
pub fn solve(cnf: &CnfFormula, assumptions: &[i32]) -> Result<SatResult> {
    let result = if assumptions.is_empty() {
        Solver::new(cnf)?.run()
    } else {
        let mut scratch = cnf.clone();
        for &a in assumptions {
            scratch.push_clause(
                vec![a],
                super::cnf::ClauseTag {
                    origin: super::cnf::ClauseOrigin::AuxDefinition,
                    label: "assumption".into(),
                },
            )?;
        }
        Solver::new(&scratch)?.run()
    };
    if let SatResult { status: SatStatus::Sat, assignment: Some(model), .. } = &result {
        if !cnf.satisfied_by(model) {
            return Err(Error::Integrity("solver returned a non-model".into()));
        }
        // assumptions must hold too
        for &a in assumptions {
            let v = a.unsigned_abs() as usize - 1;
            if model[v] != (a > 0) {
                return Err(Error::Integrity("solver violated an assumption".into()));
            }
        }
    }
    Ok(result)
}

/// Like [`solve`], additionally extracting a deletion-minimal UNSAT core for
/// unsatisfiable formulas.
pub fn solve_with_core(cnf: &CnfFormula) -> Result<SatResult> {
    let mut res = solve(cnf, &[])?;
    if res.status == SatStatus::Unsat {
        res.core = Some(super::mus::minimal_unsat_core(cnf)?);
    }
    Ok(res)
}

const NO_REASON: u32 = u32::MAX;

struct Solver {
    clauses: Vec<Vec<u32>>,
    watches: Vec<Vec<u32>>,
    assign: Vec<i8>,
    level: Vec<u32>,
    reason: Vec<u32>,
    trail: Vec<u32>,
    trail_lim: Vec<usize>,
    qhead: usize,
    seen: Vec<bool>,
    unsat_at_root: bool,
}

/// Literal codes: variable `v` (0-based) positive is `2v`, negative `2v + 1`.
fn code(lit: i32) -> u32 {
    let v = lit.unsigned_abs() - 1;
    (v << 1) | u32::from(lit < 0)
}

impl Solver {
    fn new(cnf: &CnfFormula) -> Result<Self> {
        let n = cnf.num_vars();
        let mut s = Solver {
            // all per-variable vectors are sized from n below
            clauses: Vec::with_capacity(cnf.num_clauses()),
            watches: vec![Vec::new(); 2 * n],
            assign: vec![0; n],
            level: vec![0; n],
            reason: vec![NO_REASON; n],
            trail: Vec::with_capacity(n),
            trail_lim: Vec::new(),
            qhead: 0,
            seen: vec![false; n],
            unsat_at_root: false,
        };
        for clause in cnf.clauses() {
            let lits: Vec<u32> = clause.iter().map(|&l| code(l)).collect();
            s.add_clause(lits);
            if s.unsat_at_root {
                break;
            }
        }
        Ok(s)
    }

    fn add_clause(&mut self, lits: Vec<u32>) {
        if lits.len() == 1 {
            match self.value(lits[0]) {
                Some(true) => {}
                Some(false) => self.unsat_at_root = true,
                None => self.enqueue(lits[0], NO_REASON),
            }
            return;
        }
        let ci = self.clauses.len() as u32;
        self.watches[lits[0] as usize].push(ci);
        self.watches[lits[1] as usize].push(ci);
        self.clauses.push(lits);
    }

    fn value(&self, lit: u32) -> Option<bool> {
        let a = self.assign[(lit >> 1) as usize];
        if a == 0 {
            None
        } else {
            Some((a == 1) == (lit & 1 == 0))
        }
    }

    fn current_level(&self) -> u32 {
        self.trail_lim.len() as u32
    }

    fn enqueue(&mut self, lit: u32, reason: u32) {
        let v = (lit >> 1) as usize;
        debug_assert_eq!(self.assign[v], 0);
        self.assign[v] = if lit & 1 == 0 { 1 } else { -1 };
        self.level[v] = self.current_level();
        self.reason[v] = reason;
        self.trail.push(lit);
    }

    fn backtrack(&mut self, target: u32) {
        while self.current_level() > target {
            let start = self.trail_lim.pop().unwrap();
            while self.trail.len() > start {
                let lit = self.trail.pop().unwrap();
                let v = (lit >> 1) as usize;
                self.assign[v] = 0;
                self.reason[v] = NO_REASON;
            }
        }
        self.qhead = self.trail.len();
    }

    /// Unit propagation; returns a conflicting clause index if one arises.
    fn propagate(&mut self) -> Option<u32> {
        while self.qhead < self.trail.len() {
            let p = self.trail[self.qhead];
            self.qhead += 1;
            let falsified = (p ^ 1) as usize;

            let ws = std::mem::take(&mut self.watches[falsified]);
            let mut kept = Vec::with_capacity(ws.len());
            let mut conflict = None;
            for (i, &ci) in ws.iter().enumerate() {
                let c = ci as usize;
                if self.clauses[c][0] == falsified as u32 {
                    self.clauses[c].swap(0, 1);
                }
                let first = self.clauses[c][0];
                if self.value(first) == Some(true) {
                    kept.push(ci);
                    continue;
                }
                let mut moved = false;
                for k in 2..self.clauses[c].len() {
                    let candidate = self.clauses[c][k];
                    if self.value(candidate) != Some(false) {
                        self.clauses[c].swap(1, k);
                        self.watches[candidate as usize].push(ci);
                        moved = true;
                        break;
                    }
                }
                if moved {
                    continue;
                }
                kept.push(ci);
                if self.value(first) == Some(false) {
                    kept.extend_from_slice(&ws[i + 1..]);
                    conflict = Some(ci);
                    break;
                }
                self.enqueue(first, ci);
            }
            self.watches[falsified] = kept;
            if conflict.is_some() {
                return conflict;
            }
        }
        None
    }

    /// First-UIP conflict analysis. Returns the learned clause (asserting
    /// literal first) and the backjump level.
    fn analyze(&mut self, conflict: u32) -> (Vec<u32>, u32) {
        let mut learnt: Vec<u32> = vec![u32::MAX];
        let mut counter = 0usize;
        let mut resolving: Option<u32> = None;
        let mut index = self.trail.len();
        let mut ci = conflict;

        loop {
            let clause = &self.clauses[ci as usize];
            let skip_first = usize::from(resolving.is_some());
            for &q in &clause[skip_first..] {
                let v = (q >> 1) as usize;
                if !self.seen[v] && self.level[v] > 0 {
                    self.seen[v] = true;
                    if self.level[v] == self.current_level() {
                        counter += 1;
                    } else {
                        learnt.push(q);
                    }
                }
            }
            loop {
                index -= 1;
                if self.seen[(self.trail[index] >> 1) as usize] {
                    break;
                }
            }
            let p = self.trail[index];
            let v = (p >> 1) as usize;
            self.seen[v] = false;
            counter -= 1;
            if counter == 0 {
                learnt[0] = p ^ 1;
                break;
            }
            ci = self.reason[v];
            debug_assert_ne!(ci, NO_REASON, "non-decision literal has a reason");
            resolving = Some(p);
        }

        for &q in &learnt[1..] {
            self.seen[(q >> 1) as usize] = false;
        }

        // backjump to the second-highest decision level in the clause, and
        // keep a literal of that level in the second watch slot
        let mut backjump = 0;
        let mut swap_pos = 1;
        for (i, &q) in learnt.iter().enumerate().skip(1) {
            let l = self.level[(q >> 1) as usize];
            if l > backjump {
                backjump = l;
                swap_pos = i;
            }
        }
        if learnt.len() > 1 {
            learnt.swap(1, swap_pos);
        }
        (learnt, backjump)
    }

    fn run(&mut self) -> SatResult {
        if self.unsat_at_root {
            return SatResult { status: SatStatus::Unsat, assignment: None, core: None };
        }
        loop {
            if let Some(conflict) = self.propagate() {
                if self.current_level() == 0 {
                    return SatResult { status: SatStatus::Unsat, assignment: None, core: None };
                }
                let (learnt, backjump) = self.analyze(conflict);
                self.backtrack(backjump);
                if learnt.len() == 1 {
                    self.enqueue(learnt[0], NO_REASON);
                } else {
                    let asserting = learnt[0];
                    let ci = self.clauses.len() as u32;
                    self.watches[learnt[0] as usize].push(ci);
                    self.watches[learnt[1] as usize].push(ci);
                    self.clauses.push(learnt);
                    self.enqueue(asserting, ci);
                }
            } else {
                // deterministic branching: lowest unassigned variable, true first
                match self.assign.iter().position(|&a| a == 0) {
                    None => {
                        let model = self.assign.iter().map(|&a| a == 1).collect();
                        return SatResult {
                            status: SatStatus::Sat,
                            assignment: Some(model),
                            core: None,
                        };
                    }
                    Some(v) => {
                        self.trail_lim.push(self.trail.len());
                        self.enqueue((v as u32) << 1, NO_REASON);
                    }
                }
            }
        }
    }
}

/// Brute-force satisfiability by enumeration, usable up to ~20 variables.
/// Kept here as the oracle for solver soundness tests.
#[cfg(test)]
pub(crate) fn enumerate_sat(cnf: &CnfFormula) -> bool {
    let n = cnf.num_vars();
    assert!(n <= 24, "enumeration oracle limited to small formulas");
    (0u64..(1 << n)).any(|bits| {
        let assignment: Vec<bool> = (0..n).map(|v| bits >> v & 1 == 1).collect();
        cnf.satisfied_by(&assignment)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cnf(n: usize, clauses: &[&[i32]]) -> CnfFormula {
        CnfFormula::new(n, clauses.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn direct_contradiction_is_unsat() {
        let f = cnf(1, &[&[1], &[-1]]);
        assert_eq!(solve(&f, &[]).unwrap().status, SatStatus::Unsat);
    }

    #[test]
    fn unit_propagation_finds_the_model() {
        let f = cnf(2, &[&[1, 2], &[-1]]);
        let res = solve(&f, &[]).unwrap();
        assert_eq!(res.status, SatStatus::Sat);
        let model = res.assignment.unwrap();
        assert!(!model[0]);
        assert!(model[1]);
    }

    #[test]
    fn assumptions_constrain_the_search() {
        let f = cnf(2, &[&[1, 2]]);
        let res = solve(&f, &[-1]).unwrap();
        assert_eq!(res.status, SatStatus::Sat);
        assert!(res.assignment.unwrap()[1]);
        let res = solve(&f, &[-1, -2]).unwrap();
        assert_eq!(res.status, SatStatus::Unsat);
    }

    #[test]
    fn pigeonhole_two_into_one_is_unsat() {
        // two pigeons, one hole: p1h1, p2h1, not both
        let f = cnf(2, &[&[1], &[2], &[-1, -2]]);
        assert_eq!(solve(&f, &[]).unwrap().status, SatStatus::Unsat);
    }

    #[test]
    fn matches_enumeration_on_random_3cnf() {
        let mut rng = crate::util::seeded_rng(42, "solver_unit");
        for round in 0..120 {
            let n = rng.gen_range(3..=10usize);
            let m = (n as f64 * 4.3).round() as usize;
            let clauses: Vec<Vec<i32>> = (0..m)
                .map(|_| {
                    (0..3)
                        .map(|_| {
                            let v = rng.gen_range(1..=n as i32);
                            if rng.gen_bool(0.5) {
                                v
                            } else {
                                -v
                            }
                        })
                        .collect()
                })
                .collect();
            let f = CnfFormula::new(n, clauses).unwrap();
            let got = solve(&f, &[]).unwrap().status;
            let expect = if enumerate_sat(&f) { SatStatus::Sat } else { SatStatus::Unsat };
            assert_eq!(got, expect, "round {round}: {}", f.to_dimacs());
        }
    }

    #[test]
    fn tautologies_are_harmless() {
        let f = cnf(2, &[&[1, -1], &[2]]);
        let res = solve(&f, &[]).unwrap();
        assert_eq!(res.status, SatStatus::Sat);
    }
}
