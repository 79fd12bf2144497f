//! CNF formulas with per-clause provenance and DIMACS round-tripping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where a clause came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseOrigin {
    /// A semantic requirement of the target circuit.
    Target,
    /// A semantic requirement of the i-th pervasiveness circuit.
    Pervasiveness(usize),
    /// Definition clause for an auxiliary variable introduced by the CNF
    /// translation; never counted toward circuit conflict.
    AuxDefinition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseTag {
    pub origin: ClauseOrigin,
    /// Source node or edge, for the provenance sidecar.
    pub label: String,
}

impl ClauseTag {
    pub fn semantic(&self) -> bool {
        self.origin != ClauseOrigin::AuxDefinition
    }
}

/// A CNF formula in DIMACS literal convention: variables are `1..=num_vars`,
/// negative integers negate.
#[derive(Clone, Debug, PartialEq)]
pub struct CnfFormula {
    num_vars: usize,
    clauses: Vec<Vec<i32>>,
    tags: Vec<ClauseTag>,
    var_labels: Vec<String>,
}

impl CnfFormula {
    pub fn new(num_vars: usize, clauses: Vec<Vec<i32>>) -> Result<Self> {
        let mut f = CnfFormula {
            num_vars,
            clauses: Vec::new(),
            tags: Vec::new(),
            var_labels: (1..=num_vars).map(|v| format!("x{v}")).collect(),
        };
        for c in clauses {
            f.push_clause(c, ClauseTag { origin: ClauseOrigin::Target, label: String::new() })?;
        }
        Ok(f)
    }

    pub fn with_labels(num_vars: usize, var_labels: Vec<String>) -> Result<Self> {
        if var_labels.len() != num_vars {
            return Err(Error::InvalidArgument("one label per variable required".into()));
        }
        Ok(CnfFormula { num_vars, clauses: Vec::new(), tags: Vec::new(), var_labels })
    }

    pub fn push_clause(&mut self, mut lits: Vec<i32>, tag: ClauseTag) -> Result<usize> {
        if lits.is_empty() {
            return Err(Error::InvalidArgument("empty clause".into()));
        }
        for &l in &lits {
            if l == 0 || l.unsigned_abs() as usize > self.num_vars {
                return Err(Error::InvalidArgument(format!(
                    "literal {l} out of range for {} variables",
                    self.num_vars
                )));
            }
        }
        lits.sort_unstable();
        lits.dedup();
        self.clauses.push(lits);
        self.tags.push(tag);
        Ok(self.clauses.len() - 1)
    }

    /// Add a variable (used by the encoder for auxiliary definitions).
    pub fn add_var(&mut self, label: String) -> i32 {
        self.num_vars += 1;
        self.var_labels.push(label);
        self.num_vars as i32
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_clauses(&self) -> usize {
        self.clauses.len()
    }

    pub fn clauses(&self) -> &[Vec<i32>] {
        &self.clauses
    }

    pub fn clause(&self, i: usize) -> &[i32] {
        &self.clauses[i]
    }

    pub fn tags(&self) -> &[ClauseTag] {
        &self.tags
    }

    pub fn var_labels(&self) -> &[String] {
        &self.var_labels
    }

    /// The sub-formula keeping only the clauses at `indices` (same variable
    /// space).
    pub fn subset(&self, indices: &[usize]) -> CnfFormula {
        CnfFormula {
            num_vars: self.num_vars,
            clauses: indices.iter().map(|&i| self.clauses[i].clone()).collect(),
            tags: indices.iter().map(|&i| self.tags[i].clone()).collect(),
            var_labels: self.var_labels.clone(),
        }
    }

    /// True when the assignment (indexed by variable, 1-based via `v-1`)
    /// satisfies every clause.
    pub fn satisfied_by(&self, assignment: &[bool]) -> bool {
        self.clauses.iter().all(|c| {
            c.iter().any(|&l| {
                let v = l.unsigned_abs() as usize - 1;
                if l > 0 {
                    assignment[v]
                } else {
                    !assignment[v]
                }
            })
        })
    }

    /// Standard DIMACS text: `p cnf <vars> <clauses>` then zero-terminated
    /// clause lines.
    pub fn to_dimacs(&self) -> String {
        let mut out = format!("p cnf {} {}\n", self.num_vars, self.clauses.len());
        for c in &self.clauses {
            for l in c {
                out.push_str(&l.to_string());
                out.push(' ');
            }
            out.push_str("0\n");
        }
        out
    }

    pub fn from_dimacs(text: &str) -> Result<Self> {
        let mut header: Option<(usize, usize)> = None;
        let mut clauses: Vec<Vec<i32>> = Vec::new();
        let mut current: Vec<i32> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('c') {
                continue;
            }
            if line.starts_with('p') {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 4 || parts[1] != "cnf" {
                    return Err(Error::InvalidArgument(format!("bad DIMACS header {line:?}")));
                }
                let vars = parts[2].parse().map_err(|_| {
                    Error::InvalidArgument("unparseable variable count".into())
                })?;
                let n_clauses = parts[3].parse().map_err(|_| {
                    Error::InvalidArgument("unparseable clause count".into())
                })?;
                header = Some((vars, n_clauses));
                continue;
            }
            for tok in line.split_whitespace() {
                let l: i32 = tok
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad literal {tok:?}")))?;
                if l == 0 {
                    clauses.push(std::mem::take(&mut current));
                } else {
                    current.push(l);
                }
            }
        }
        let Some((vars, n_clauses)) = header else {
            return Err(Error::InvalidArgument("missing DIMACS header".into()));
        };
        if !current.is_empty() {
            return Err(Error::InvalidArgument("unterminated clause".into()));
        }
        if clauses.len() != n_clauses {
            return Err(Error::InvalidArgument(format!(
                "header promises {n_clauses} clauses, found {}",
                clauses.len()
            )));
        }
        CnfFormula::new(vars, clauses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rejects_bad_clauses() {
        assert!(CnfFormula::new(2, vec![vec![]]).is_err());
        assert!(CnfFormula::new(2, vec![vec![0]]).is_err());
        assert!(CnfFormula::new(2, vec![vec![3]]).is_err());
        assert!(CnfFormula::new(2, vec![vec![1, -2]]).is_ok());
    }

    #[test]
    fn dimacs_roundtrip_and_fixture_format() {
        let f = CnfFormula::new(1, vec![vec![1], vec![-1]]).unwrap();
        let text = f.to_dimacs();
        assert_eq!(text, "p cnf 1 2\n1 0\n-1 0\n");
        let back = CnfFormula::from_dimacs(&text).unwrap();
        assert_eq!(back.clauses(), f.clauses());
        assert_eq!(back.num_vars(), 1);
    }

    #[test]
    fn dimacs_parser_handles_comments_and_multiline_clauses() {
        let text = "c a comment\np cnf 3 2\n1 -2\n3 0\n2 0\n";
        let f = CnfFormula::from_dimacs(text).unwrap();
        assert_eq!(f.clauses(), &[vec![-2, 1, 3], vec![2]]);
        assert!(CnfFormula::from_dimacs("p cnf 1 2\n1 0\n").is_err());
        assert!(CnfFormula::from_dimacs("1 0\n").is_err());
    }

    #[test]
    fn satisfied_by_checks_all_clauses() {
        let f = CnfFormula::new(2, vec![vec![1, 2], vec![-1]]).unwrap();
        assert!(f.satisfied_by(&[false, true]));
        assert!(!f.satisfied_by(&[true, true]));
        assert!(!f.satisfied_by(&[false, false]));
    }
}
