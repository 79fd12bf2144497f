//! CNF encoding of logical circuits and a complete SAT backend.
//!
//! Circuit conflict asks whether the target task's required components can
//! be allocated to its update without touching components the pervasiveness
//! circuits require. The encoding gives every eligible component one Boolean
//! variable, the solver decides satisfiability, and for unsatisfiable
//! formulas a deletion-minimal UNSAT core measures how many semantic
//! requirements actually clash.

mod cnf;
mod encode;
mod mus;
mod solver;

pub use cnf::{ClauseOrigin, ClauseTag, CnfFormula};
pub use encode::{circuit_conflict, encode_conflict};
pub use mus::minimal_unsat_core;
pub use solver::{solve, solve_with_core, SatResult, SatStatus};
