//! Deletion-based minimal UNSAT core extraction.

use super::cnf::CnfFormula;
use super::solver::{solve, SatStatus};
use crate::error::{Error, Result};

/// A minimal (not necessarily minimum) unsatisfiable subset of clauses.
///
/// Clauses are considered for deletion in index order: each is dropped if
/// the remainder stays unsatisfiable. The result is itself UNSAT and every
/// single-clause deletion of it is SAT. Deterministic because the deletion
/// order is fixed.
pub fn minimal_unsat_core(cnf: &CnfFormula) -> Result<Vec<usize>> {
    if solve(cnf, &[])?.status == SatStatus::Sat {
        return Err(Error::InvalidArgument(
            "cannot extract a core from a satisfiable formula".into(),
        ));
    }
    let mut kept: Vec<usize> = (0..cnf.num_clauses()).collect();
    let mut i = 0;
    while i < kept.len() {
        let mut candidate = kept.clone();
        candidate.remove(i);
        if solve(&cnf.subset(&candidate), &[])?.status == SatStatus::Unsat {
            kept = candidate;
        } else {
            i += 1;
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::satcore::solver::enumerate_sat;
    use rand::Rng;

    fn cnf(n: usize, clauses: &[&[i32]]) -> CnfFormula {
        CnfFormula::new(n, clauses.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn unique_core_is_found() {
        let f = cnf(3, &[&[1], &[-1], &[2, 3]]);
        let core = minimal_unsat_core(&f).unwrap();
        assert_eq!(core, vec![0, 1]);
    }

    #[test]
    fn sat_input_is_an_error() {
        let f = cnf(2, &[&[1], &[2]]);
        assert!(minimal_unsat_core(&f).is_err());
    }

    #[test]
    fn core_is_unsat_and_one_deletion_short_of_sat() {
        let mut rng = crate::util::seeded_rng(7, "mus_unit");
        let mut found = 0;
        while found < 20 {
            let n = rng.gen_range(3..=6usize);
            let m = rng.gen_range(6..=12usize);
            let clauses: Vec<Vec<i32>> = (0..m)
                .map(|_| {
                    let len = rng.gen_range(1..=3usize);
                    (0..len)
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
            if enumerate_sat(&f) {
                continue;
            }
            found += 1;
            let core = minimal_unsat_core(&f).unwrap();
            let core_formula = f.subset(&core);
            assert!(!enumerate_sat(&core_formula), "core must stay UNSAT");
            for drop in 0..core.len() {
                let mut reduced = core.clone();
                reduced.remove(drop);
                assert!(
                    enumerate_sat(&f.subset(&reduced)),
                    "removing any single core clause must give SAT"
                );
            }
        }
    }
}
