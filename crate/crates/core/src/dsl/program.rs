use std::fmt;

use thiserror::Error;

use super::opcode::{Kind, OpCode};

/// Name of an SSA value: its position in the definition sequence plus its kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId {
    pub index: u32,
    pub kind: Kind,
}

impl ValueId {
    pub fn scalar(index: u32) -> Self {
        ValueId { index, kind: Kind::Scalar }
    }

    pub fn vector(index: u32) -> Self {
        ValueId { index, kind: Kind::Vector }
    }
}

impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index)
    }
}

/// A storage slot in a compiled program. Scalar and vector slots live in
/// separate pools, so `s0` and `v0` are different slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub index: u32,
    pub kind: Kind,
}

impl Slot {
    pub fn scalar(index: u32) -> Self {
        Slot { index, kind: Kind::Scalar }
    }

    pub fn vector(index: u32) -> Self {
        Slot { index, kind: Kind::Vector }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind.prefix(), self.index)
    }
}

/// One instruction. Unary operations keep a duplicate of their operand in
/// the second position; use [`Instr::operands`] to see the real ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Instr<R> {
    pub dest: R,
    pub op: OpCode,
    args: [R; 2],
}

impl<R: Copy> Instr<R> {
    pub fn new(dest: R, op: OpCode, operands: &[R]) -> Self {
        assert_eq!(operands.len(), op.arity(), "{op} takes {} operands", op.arity());
        let args = [operands[0], *operands.last().unwrap()];
        Instr { dest, op, args }
    }

    pub fn operands(&self) -> &[R] {
        &self.args[..self.op.arity()]
    }
}

pub type SsaInstr = Instr<ValueId>;
pub type TacInstr = Instr<Slot>;

/// Position of each program input.
pub const INPUT_ROLES: [&str; 3] = ["x0", "x", "n"];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProgramError {
    #[error("value {id} is defined more than once")]
    Redefinition { id: ValueId },
    #[error("value {id} is declared out of order (indices must strictly increase)")]
    OutOfOrder { id: ValueId },
    #[error("instruction {instr} ({op}) uses {id} before its definition")]
    UseBeforeDef { instr: usize, op: OpCode, id: ValueId },
    #[error("instruction {instr}: {op} cannot take operands of kinds {found:?}")]
    KindMismatch { instr: usize, op: OpCode, found: Vec<Kind> },
    #[error("instruction {instr}: destination of {op} must be a {expected:?}")]
    DestKind { instr: usize, op: OpCode, expected: Kind },
    #[error("hyperparameter {0} must be a scalar")]
    HyperparamKind(String),
    #[error("input {0} must be a vector")]
    InputKind(String),
    #[error("program body is empty")]
    EmptyBody,
    #[error("return value {id} must be a vector defined by the last instruction")]
    BadReturn { id: String },
    #[error("program has {len} instructions, more than the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("slot {slot} is outside the declared pool")]
    SlotOutOfRange { slot: Slot },
    #[error("slot {slot} is declared twice in the program header")]
    DuplicateSlot { slot: Slot },
    #[error("instruction {instr} ({op}) reads slot {slot} before it is written")]
    ReadBeforeWrite { instr: usize, op: OpCode, slot: Slot },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparam<R> {
    pub id: R,
    pub init: f64,
}

/// A straight-line program in single-assignment form.
///
/// Definition order is hyperparameters, then the three inputs `(x0, x, n)`,
/// then the body. Every index is assigned once and indices strictly increase
/// along that order; gaps are allowed (programs with dead code removed keep
/// their original names).
#[derive(Debug, Clone, PartialEq)]
pub struct SsaProgram {
    pub hyperparams: Vec<Hyperparam<ValueId>>,
    pub inputs: [ValueId; 3],
    pub body: Vec<SsaInstr>,
    pub ret: ValueId,
}

impl SsaProgram {
    pub fn new(
        hyperparams: Vec<Hyperparam<ValueId>>,
        inputs: [ValueId; 3],
        body: Vec<SsaInstr>,
        ret: ValueId,
    ) -> Result<Self, ProgramError> {
        let p = SsaProgram { hyperparams, inputs, body, ret };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn hyper_inits(&self) -> Vec<f64> {
        self.hyperparams.iter().map(|h| h.init).collect()
    }

    /// Largest index in use, which bounds dense per-value tables.
    pub fn max_index(&self) -> u32 {
        self.definitions().map(|id| id.index).max().unwrap_or(0)
    }

    /// All defined values in definition order.
    pub fn definitions(&self) -> impl Iterator<Item = ValueId> + '_ {
        self.hyperparams
            .iter()
            .map(|h| h.id)
            .chain(self.inputs.iter().copied())
            .chain(self.body.iter().map(|i| i.dest))
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        for h in &self.hyperparams {
            if h.id.kind != Kind::Scalar {
                return Err(ProgramError::HyperparamKind(h.id.to_string()));
            }
        }
        for id in &self.inputs {
            if id.kind != Kind::Vector {
                return Err(ProgramError::InputKind(id.to_string()));
            }
        }
        let mut defined: Vec<Option<Kind>> = vec![None; self.max_index() as usize + 1];
        let mut last: Option<u32> = None;
        let header = self.hyperparams.len() + self.inputs.len();
        for (pos, id) in self.definitions().enumerate() {
            if defined[id.index as usize].is_some() {
                return Err(ProgramError::Redefinition { id });
            }
            if last.is_some_and(|l| id.index <= l) {
                return Err(ProgramError::OutOfOrder { id });
            }
            if pos >= header {
                let instr = pos - header;
                let ins = &self.body[instr];
                check_kinds(instr, ins, |a| a.kind)?;
                for &a in ins.operands() {
                    let ok = defined.get(a.index as usize) == Some(&Some(a.kind));
                    if !ok {
                        return Err(ProgramError::UseBeforeDef { instr, op: ins.op, id: a });
                    }
                }
            }
            defined[id.index as usize] = Some(id.kind);
            last = Some(id.index);
        }
        let last_dest = self.body.last().map(|i| i.dest);
        if self.body.is_empty() {
            return Err(ProgramError::EmptyBody);
        }
        if self.ret.kind != Kind::Vector || last_dest != Some(self.ret) {
            return Err(ProgramError::BadReturn { id: self.ret.to_string() });
        }
        Ok(())
    }

    pub fn validate_len(&self, max_len: usize) -> Result<(), ProgramError> {
        self.validate()?;
        if self.body.len() > max_len {
            return Err(ProgramError::TooLong { len: self.body.len(), max: max_len });
        }
        Ok(())
    }

}

fn check_kinds<R: Copy>(
    instr: usize,
    ins: &Instr<R>,
    kind: impl Fn(R) -> Kind,
) -> Result<(), ProgramError> {
    let found: Vec<Kind> = ins.operands().iter().map(|&a| kind(a)).collect();
    if found != ins.op.params() {
        return Err(ProgramError::KindMismatch { instr, op: ins.op, found });
    }
    if kind(ins.dest) != ins.op.result() {
        return Err(ProgramError::DestKind { instr, op: ins.op, expected: ins.op.result() });
    }
    Ok(())
}

/// Slot-addressed three-address program; the execution form of an
/// [`SsaProgram`]. Slots may be overwritten once their old value is dead.
#[derive(Debug, Clone, PartialEq)]
pub struct TacProgram {
    pub n_scalar_slots: u32,
    pub n_vector_slots: u32,
    pub hyperparams: Vec<Hyperparam<Slot>>,
    pub inputs: [Slot; 3],
    pub body: Vec<TacInstr>,
    pub ret: Slot,
}

impl TacProgram {
    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    pub fn hyper_inits(&self) -> Vec<f64> {
        self.hyperparams.iter().map(|h| h.init).collect()
    }

    fn in_range(&self, s: Slot) -> bool {
        match s.kind {
            Kind::Scalar => s.index < self.n_scalar_slots,
            Kind::Vector => s.index < self.n_vector_slots,
        }
    }

    /// Structural checks plus an abstract interpretation over slot states
    /// proving that no slot is read before it is written.
    pub fn validate(&self) -> Result<(), ProgramError> {
        let mut init_s = vec![false; self.n_scalar_slots as usize];
        let mut init_v = vec![false; self.n_vector_slots as usize];
        let header = self
            .hyperparams
            .iter()
            .map(|h| (h.id, Kind::Scalar))
            .chain(self.inputs.iter().map(|&s| (s, Kind::Vector)));
        for (slot, want) in header {
            if slot.kind != want {
                return Err(match want {
                    Kind::Scalar => ProgramError::HyperparamKind(slot.to_string()),
                    Kind::Vector => ProgramError::InputKind(slot.to_string()),
                });
            }
            if !self.in_range(slot) {
                return Err(ProgramError::SlotOutOfRange { slot });
            }
            let cell = match slot.kind {
                Kind::Scalar => &mut init_s[slot.index as usize],
                Kind::Vector => &mut init_v[slot.index as usize],
            };
            if *cell {
                return Err(ProgramError::DuplicateSlot { slot });
            }
            *cell = true;
        }
        for (instr, ins) in self.body.iter().enumerate() {
            check_kinds(instr, ins, |s| s.kind)?;
            for &s in ins.operands().iter().chain(std::iter::once(&ins.dest)) {
                if !self.in_range(s) {
                    return Err(ProgramError::SlotOutOfRange { slot: s });
                }
            }
            for &s in ins.operands() {
                let ok = match s.kind {
                    Kind::Scalar => init_s[s.index as usize],
                    Kind::Vector => init_v[s.index as usize],
                };
                if !ok {
                    return Err(ProgramError::ReadBeforeWrite { instr, op: ins.op, slot: s });
                }
            }
            match ins.dest.kind {
                Kind::Scalar => init_s[ins.dest.index as usize] = true,
                Kind::Vector => init_v[ins.dest.index as usize] = true,
            }
        }
        if self.body.is_empty() {
            return Err(ProgramError::EmptyBody);
        }
        if self.ret.kind != Kind::Vector || self.body.last().map(|i| i.dest) != Some(self.ret) {
            return Err(ProgramError::BadReturn { id: self.ret.to_string() });
        }
        Ok(())
    }
}
