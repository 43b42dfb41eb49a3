//! Hand-written reference programs.

use crate::dsl::{parse_program, SsaProgram};

/// Boundary-attack style proposal: an orthogonal perturbation on the sphere
/// around `x0` followed by a small contraction toward `x0`. Hyperparameters
/// are the contraction fraction `s0` and the relative spherical step `s1`.
pub const BOUNDARY: &str = include_str!("../programs/boundary.ssa");

pub fn boundary() -> SsaProgram {
    parse_program(BOUNDARY).expect("bundled reference program parses")
}
