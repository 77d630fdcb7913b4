//! Non-learned reference solvers: an exact depth-first branch-and-bound
//! (the ground-truth oracle), a variable neighborhood search heuristic,
//! and the greedy nearest-feasible constructor that seeds it.

mod exact;
mod greedy;
mod vns;

pub use exact::{enumerate_optimal, exact_solve, exact_solve_with, ExactConfig, ExactResult};
pub use greedy::greedy_construct;
pub use vns::{vns_solve, VNSConfig};
