//! Random SSA program generation.
//!
//! Programs start with the hyperparameters and the inputs `(x0, x, n)`,
//! optionally followed by the predefined prologue `v = x0 - x`, `d = |v|`,
//! `u = v / d`. Remaining instructions pick an opcode uniformly (the final one
//! uniformly among vector-producing opcodes) and draw each operand from the
//! earlier values of the right kind, weighting values nothing has consumed
//! yet by `unused_bias`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Hyperparam, Instr, Kind, OpCode, SsaProgram, ValueId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    /// Total instruction budget, predefined operations included.
    pub max_len: usize,
    pub n_hyperparams: usize,
    pub hyperparam_init: f64,
    /// Weight of not-yet-consumed values relative to consumed ones.
    pub unused_bias: f64,
    /// Emit the `v, d, u` prologue.
    pub predefined: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_len: 20,
            n_hyperparams: 1,
            hyperparam_init: 0.01,
            unused_bias: 4.0,
            predefined: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("max_len must be at least 4, got {0}")]
    MaxLen(usize),
    #[error("unused_bias must be a finite number >= 1, got {0}")]
    UnusedBias(f64),
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_len < 4 {
            return Err(ConfigError::MaxLen(self.max_len));
        }
        if !(self.unused_bias >= 1.0 && self.unused_bias.is_finite()) {
            return Err(ConfigError::UnusedBias(self.unused_bias));
        }
        Ok(())
    }
}

/// Incrementally builds an SSA program, tracking which values have been
/// consumed.
#[derive(Debug, Clone)]
pub struct SsaBuilder {
    hyperparams: Vec<Hyperparam<ValueId>>,
    inputs: [ValueId; 3],
    body: Vec<Instr<ValueId>>,
    values: Vec<ValueId>,
    used: Vec<bool>,
    /// Values defined so far, by kind: `[scalar, vector]`.
    counts: [usize; 2],
    /// Values not consumed yet, by kind.
    unused: [usize; 2],
}

impl SsaBuilder {
    pub fn new(n_hyperparams: usize, init: f64) -> Self {
        let hyperparams: Vec<_> = (0..n_hyperparams as u32)
            .map(|i| Hyperparam { id: ValueId::scalar(i), init })
            .collect();
        let h = n_hyperparams as u32;
        let inputs = [ValueId::vector(h), ValueId::vector(h + 1), ValueId::vector(h + 2)];
        let mut values = Vec::with_capacity(n_hyperparams + 3 + 24);
        values.extend(hyperparams.iter().map(|p| p.id).chain(inputs));
        let mut used = Vec::with_capacity(values.capacity());
        used.resize(values.len(), false);
        SsaBuilder { hyperparams, inputs, body: Vec::with_capacity(24), values, used, counts: [n_hyperparams, 3], unused: [n_hyperparams, 3] }
    }

    pub fn x0(&self) -> ValueId {
        self.inputs[0]
    }

    pub fn x(&self) -> ValueId {
        self.inputs[1]
    }

    pub fn n(&self) -> ValueId {
        self.inputs[2]
    }

    pub fn hyperparam(&self, i: usize) -> ValueId {
        self.hyperparams[i].id
    }

    pub fn len(&self) -> usize {
        self.body.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.is_empty()
    }

    /// All values defined so far, in definition order.
    pub fn values(&self) -> &[ValueId] {
        &self.values
    }

    pub fn is_used(&self, id: ValueId) -> bool {
        self.used[id.index as usize]
    }

    pub fn push(&mut self, op: OpCode, operands: &[ValueId]) -> ValueId {
        let dest = ValueId { index: self.values.len() as u32, kind: op.result() };
        for a in operands {
            let used = &mut self.used[a.index as usize];
            if !*used {
                *used = true;
                self.unused[a.kind as usize] -= 1;
            }
        }
        self.body.push(Instr::new(dest, op, operands));
        self.values.push(dest);
        self.used.push(false);
        self.counts[dest.kind as usize] += 1;
        self.unused[dest.kind as usize] += 1;
        dest
    }

    /// Finishes with the last instruction as the return value.
    pub fn finish(self) -> SsaProgram {
        let ret = self.body.last().expect("non-empty program").dest;
        SsaProgram { hyperparams: self.hyperparams, inputs: self.inputs, body: self.body, ret }
    }

    fn has_kind(&self, kind: Kind) -> bool {
        self.counts[kind as usize] > 0
    }

    fn feasible(&self, op: OpCode) -> bool {
        op.params().iter().all(|&k| self.has_kind(k))
    }

    fn operand_weight(&self, id: ValueId, unused_bias: f64) -> f64 {
        if self.used[id.index as usize] {
            1.0
        } else {
            unused_bias
        }
    }

    fn pick_operand(&self, kind: Kind, unused_bias: f64, rng: &mut impl Rng) -> ValueId {
        let k = kind as usize;
        let total = (self.counts[k] - self.unused[k]) as f64 + self.unused[k] as f64 * unused_bias;
        let mut t = rng.random::<f64>() * total;
        let mut last = None;
        for &v in self.values.iter().filter(|v| v.kind == kind) {
            let w = self.operand_weight(v, unused_bias);
            if t < w {
                return v;
            }
            t -= w;
            last = Some(v);
        }
        last.expect("operand kind available")
    }
}

/// Handles for the prologue values.
#[derive(Debug, Clone, Copy)]
pub struct Predefined {
    pub v: ValueId,
    pub d: ValueId,
    pub u: ValueId,
}

/// Appends `v = x0 - x`, `d = NORM(v)`, `u = v / d`.
pub fn emit_predefined(b: &mut SsaBuilder) -> Predefined {
    let v = b.push(OpCode::SubVV, &[b.x0(), b.x()]);
    let d = b.push(OpCode::NormV, &[v]);
    let u = b.push(OpCode::DivVS, &[v, d]);
    Predefined { v, d, u }
}

fn pick_op(b: &SsaBuilder, choices: &[OpCode], rng: &mut impl Rng) -> OpCode {
    if choices.iter().all(|&op| b.feasible(op)) {
        return choices[rng.random_range(0..choices.len())];
    }
    let ok: Vec<OpCode> = choices.iter().copied().filter(|&op| b.feasible(op)).collect();
    ok[rng.random_range(0..ok.len())]
}

fn push_random(b: &mut SsaBuilder, op: OpCode, unused_bias: f64, rng: &mut impl Rng) {
    let mut operands = [ValueId::scalar(0); 2];
    for (slot, &kind) in operands.iter_mut().zip(op.params()) {
        *slot = b.pick_operand(kind, unused_bias, rng);
    }
    b.push(op, &operands[..op.arity()]);
}

/// Draws one program of exactly `cfg.max_len` instructions.
pub fn gen_random(cfg: &GenConfig, rng: &mut impl Rng) -> SsaProgram {
    let mut b = SsaBuilder::new(cfg.n_hyperparams, cfg.hyperparam_init);
    if cfg.predefined {
        emit_predefined(&mut b);
    }
    while b.len() + 1 < cfg.max_len {
        let op = pick_op(&b, &OpCode::ALL, rng);
        push_random(&mut b, op, cfg.unused_bias, rng);
    }
    let op = pick_op(&b, &OpCode::VECTOR_RESULT, rng);
    push_random(&mut b, op, cfg.unused_bias, rng);
    b.finish()
}

/// Exact probability that [`gen_random`] emits `p` under `cfg`, or 0 when
/// `p` lies outside the generator's support.
pub fn generation_probability(p: &SsaProgram, cfg: &GenConfig) -> f64 {
    if p.body.len() != cfg.max_len || p.hyperparams.len() != cfg.n_hyperparams {
        return 0.0;
    }
    let mut b = SsaBuilder::new(cfg.n_hyperparams, cfg.hyperparam_init);
    if b.hyperparams != p.hyperparams || b.inputs != p.inputs {
        return 0.0;
    }
    let mut prob = 1.0;
    let mut start = 0;
    if cfg.predefined {
        let pre = emit_predefined(&mut b);
        if p.body[..3] != b.body[..] || pre.u != p.body[2].dest {
            return 0.0;
        }
        start = 3;
    }
    for (k, ins) in p.body.iter().enumerate().skip(start) {
        let choices: &[OpCode] = if k + 1 == cfg.max_len { &OpCode::VECTOR_RESULT } else { &OpCode::ALL };
        let feasible: Vec<OpCode> = choices.iter().copied().filter(|&op| b.feasible(op)).collect();
        if !feasible.contains(&ins.op) || ins.dest.index as usize != b.values.len() {
            return 0.0;
        }
        prob /= feasible.len() as f64;
        for &a in ins.operands() {
            if (a.index as usize) >= b.values.len() || b.values[a.index as usize] != a {
                return 0.0;
            }
            let total: f64 = b
                .values
                .iter()
                .filter(|v| v.kind == a.kind)
                .map(|&v| b.operand_weight(v, cfg.unused_bias))
                .sum();
            prob *= b.operand_weight(a, cfg.unused_bias) / total;
        }
        b.push(ins.op, ins.operands());
    }
    prob
}
