//! Random search for decision-based adversarial attack programs.
//!
//! Candidate `generate()` functions for a random-walk attack are written in
//! a tiny straight-line vector language, generated at random in SSA form,
//! pruned statically and dynamically, compiled to slot-allocated three
//! address code, and scored against black-box decision oracles.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsl;
pub mod analysis;
pub mod compiler;
pub mod gen;
pub mod rng;
pub mod attack;
pub mod oracle;
pub mod reference;
pub mod search;
pub mod report;
