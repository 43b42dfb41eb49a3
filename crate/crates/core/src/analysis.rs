//! Static analyses over SSA programs: liveness with respect to the return
//! value, dead-instruction detection, and the inputs check.
//!
//! Liveness here is purely syntactic. No constant folding is done, so
//! `SUB(v1,v1)` still makes `v1` live.

use std::fmt;

use crate::dsl::{SsaProgram, ValueId, INPUT_ROLES};

/// Values the return value transitively depends on (including itself).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiveSet {
    live: Vec<bool>,
}

impl LiveSet {
    pub fn contains(&self, id: ValueId) -> bool {
        self.live.get(id.index as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.live.iter().filter(|&&l| l).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn live_set(p: &SsaProgram) -> LiveSet {
    let mut live = vec![false; p.max_index() as usize + 1];
    live[p.ret.index as usize] = true;
    for ins in p.body.iter().rev() {
        if live[ins.dest.index as usize] {
            for a in ins.operands() {
                live[a.index as usize] = true;
            }
        }
    }
    LiveSet { live }
}

/// Results of instructions that cannot influence the return value.
pub fn dead_instructions(p: &SsaProgram) -> Vec<ValueId> {
    let live = live_set(p);
    p.body.iter().map(|i| i.dest).filter(|&d| !live.contains(d)).collect()
}

/// Copy of `p` without its dead instructions. Value names are kept.
pub fn eliminate_dead_code(p: &SsaProgram) -> SsaProgram {
    let live = live_set(p);
    SsaProgram {
        hyperparams: p.hyperparams.clone(),
        inputs: p.inputs,
        body: p.body.iter().filter(|i| live.contains(i.dest)).copied().collect(),
        ret: p.ret,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Pass,
    /// The first declared input or hyperparameter that does not reach the
    /// return value, checked in the order x0, x, n, then hyperparameters.
    Fail { missing: ValueId, role: String },
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, CheckOutcome::Pass)
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckOutcome::Pass => f.write_str("pass"),
            CheckOutcome::Fail { missing, role } => {
                write!(f, "fail: {role} ({missing}) does not influence the result")
            }
        }
    }
}

/// Requires every input to be live; hyperparameters too when
/// `require_hyperparams` is set.
pub fn inputs_check(p: &SsaProgram, require_hyperparams: bool) -> CheckOutcome {
    let live = live_set(p);
    for (&id, role) in p.inputs.iter().zip(INPUT_ROLES) {
        if !live.contains(id) {
            return CheckOutcome::Fail { missing: id, role: role.to_string() };
        }
    }
    if require_hyperparams {
        for (i, h) in p.hyperparams.iter().enumerate() {
            if !live.contains(h.id) {
                return CheckOutcome::Fail { missing: h.id, role: format!("hyperparameter {i}") };
            }
        }
    }
    CheckOutcome::Pass
}
