//! SSA to TAC lowering: dead-code elimination followed by a single forward
//! pass of slot allocation.
//!
//! Hyperparameters take scalar slots `0..h` and the inputs take vector slots
//! `0..3` in declaration order. A value's slot returns to its pool right
//! after the instruction that uses it last, and every destination takes the
//! lowest free slot of its kind (or a fresh one). Instructions are never
//! reordered.

use std::collections::BTreeSet;

use crate::analysis::live_set;
use crate::dsl::{Hyperparam, Instr, Kind, ProgramError, Slot, SsaProgram, TacProgram, ValueId};

#[derive(Debug, Default)]
struct Pool {
    free: BTreeSet<u32>,
    next: u32,
}

impl Pool {
    fn fresh(&mut self) -> u32 {
        self.next += 1;
        self.next - 1
    }

    fn alloc(&mut self) -> u32 {
        self.free.pop_first().unwrap_or_else(|| self.fresh())
    }

    fn release(&mut self, slot: u32) {
        self.free.insert(slot);
    }
}

struct Allocator {
    scalars: Pool,
    vectors: Pool,
    slot_of: Vec<Option<u32>>,
}

impl Allocator {
    fn pool(&mut self, kind: Kind) -> &mut Pool {
        match kind {
            Kind::Scalar => &mut self.scalars,
            Kind::Vector => &mut self.vectors,
        }
    }

    fn bind_fresh(&mut self, id: ValueId) -> Slot {
        let index = self.pool(id.kind).fresh();
        self.slot_of[id.index as usize] = Some(index);
        Slot { index, kind: id.kind }
    }

    fn bind(&mut self, id: ValueId) -> Slot {
        let index = self.pool(id.kind).alloc();
        self.slot_of[id.index as usize] = Some(index);
        Slot { index, kind: id.kind }
    }

    fn slot(&self, id: ValueId) -> Slot {
        let index = self.slot_of[id.index as usize].expect("operand bound to a slot");
        Slot { index, kind: id.kind }
    }

    fn release(&mut self, id: ValueId) {
        let slot = self.slot(id);
        self.pool(id.kind).release(slot.index);
    }
}

pub fn compile(p: &SsaProgram) -> Result<TacProgram, ProgramError> {
    p.validate()?;
    let live = live_set(p);
    let body: Vec<_> = p.body.iter().filter(|i| live.contains(i.dest)).collect();

    let size = p.max_index() as usize + 1;
    let mut last_use: Vec<Option<usize>> = vec![None; size];
    for (pos, ins) in body.iter().enumerate() {
        for a in ins.operands() {
            last_use[a.index as usize] = Some(pos);
        }
    }
    last_use[p.ret.index as usize] = Some(usize::MAX);

    let mut alloc = Allocator { scalars: Pool::default(), vectors: Pool::default(), slot_of: vec![None; size] };
    let hyperparams: Vec<_> = p
        .hyperparams
        .iter()
        .map(|h| Hyperparam { id: alloc.bind_fresh(h.id), init: h.init })
        .collect();
    let inputs = p.inputs.map(|id| alloc.bind_fresh(id));
    for id in p.hyperparams.iter().map(|h| h.id).chain(p.inputs) {
        if last_use[id.index as usize].is_none() {
            alloc.release(id);
        }
    }

    let mut out = Vec::with_capacity(body.len());
    for (pos, ins) in body.iter().enumerate() {
        let operands: Vec<Slot> = ins.operands().iter().map(|&a| alloc.slot(a)).collect();
        let ops = ins.operands();
        for (k, &a) in ops.iter().enumerate() {
            let repeated = ops[..k].contains(&a);
            if !repeated && last_use[a.index as usize] == Some(pos) {
                alloc.release(a);
            }
        }
        let dest = alloc.bind(ins.dest);
        out.push(Instr::new(dest, ins.op, &operands));
    }

    let tac = TacProgram {
        n_scalar_slots: alloc.scalars.next,
        n_vector_slots: alloc.vectors.next,
        hyperparams,
        inputs,
        ret: alloc.slot(p.ret),
        body: out,
    };
    debug_assert_eq!(tac.validate(), Ok(()));
    Ok(tac)
}

/// Slot counts `(scalar, vector)` an uncompiled program would need with one
/// slot per live value, inputs and hyperparameters included.
pub fn ssa_slot_counts(p: &SsaProgram) -> (u32, u32) {
    let live = live_set(p);
    let mut counts = (0, 0);
    for id in p.hyperparams.iter().map(|h| h.id).chain(p.inputs) {
        match id.kind {
            Kind::Scalar => counts.0 += 1,
            Kind::Vector => counts.1 += 1,
        }
    }
    for ins in p.body.iter().filter(|i| live.contains(i.dest)) {
        match ins.dest.kind {
            Kind::Scalar => counts.0 += 1,
            Kind::Vector => counts.1 += 1,
        }
    }
    counts
}
