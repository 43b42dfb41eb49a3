//! Reference interpreters for both program forms.
//!
//! Both forms evaluate every operation through the kernels in [`kernels`],
//! so for the same inputs they produce bitwise-identical results. No
//! operation traps: division by zero and overflow follow IEEE semantics.

use thiserror::Error;

use super::opcode::{Kind, OpCode};
use super::program::{SsaProgram, TacProgram};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExecError {
    #[error("vector operands have mismatched dimensions ({0} vs {1})")]
    DimMismatch(usize, usize),
    #[error("{op} expects operand kinds {expected:?}")]
    Operands { op: OpCode, expected: &'static [Kind] },
    #[error("expected {expected} hyperparameter values, got {got}")]
    HyperCount { expected: usize, got: usize },
    #[error("vector dimension must be positive")]
    ZeroDim,
}

/// Arithmetic shared by every evaluator. Reductions accumulate left to right
/// starting from `0.0`; nothing is fused or reassociated.
pub mod kernels {
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    #[inline]
    pub fn norm(a: &[f64]) -> f64 {
        dot(a, a).sqrt()
    }

    #[inline]
    pub fn add(a: &[f64], b: &[f64], out: &mut [f64]) {
        for ((r, x), y) in out.iter_mut().zip(a).zip(b) {
            *r = x + y;
        }
    }

    #[inline]
    pub fn sub(a: &[f64], b: &[f64], out: &mut [f64]) {
        for ((r, x), y) in out.iter_mut().zip(a).zip(b) {
            *r = x - y;
        }
    }

    #[inline]
    pub fn mul_scalar(a: &[f64], s: f64, out: &mut [f64]) {
        for (r, x) in out.iter_mut().zip(a) {
            *r = x * s;
        }
    }

    #[inline]
    pub fn div_scalar(a: &[f64], s: f64, out: &mut [f64]) {
        for (r, x) in out.iter_mut().zip(a) {
            *r = x / s;
        }
    }

    /// `‖a − b‖₂` through the same accumulation order as NORM.
    pub fn distance(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            acc += d * d;
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Value {
    pub fn kind(&self) -> Kind {
        match self {
            Value::Scalar(_) => Kind::Scalar,
            Value::Vector(_) => Kind::Vector,
        }
    }
}

pub fn eval_op(op: OpCode, operands: &[Value]) -> Result<Value, ExecError> {
    let bad = || ExecError::Operands { op, expected: op.params() };
    let kinds: Vec<Kind> = operands.iter().map(Value::kind).collect();
    if kinds != op.params() {
        return Err(bad());
    }
    let same_dim = |a: &Vec<f64>, b: &Vec<f64>| {
        if a.len() == b.len() {
            Ok(())
        } else {
            Err(ExecError::DimMismatch(a.len(), b.len()))
        }
    };
    use Value::{Scalar as S, Vector as V};
    Ok(match (op, operands) {
        (OpCode::AddSS, [S(a), S(b)]) => S(a + b),
        (OpCode::SubSS, [S(a), S(b)]) => S(a - b),
        (OpCode::MulSS, [S(a), S(b)]) => S(a * b),
        (OpCode::DivSS, [S(a), S(b)]) => S(a / b),
        (OpCode::AddVV | OpCode::SubVV, [V(a), V(b)]) => {
            same_dim(a, b)?;
            let mut out = vec![0.0; a.len()];
            if op == OpCode::AddVV {
                kernels::add(a, b, &mut out);
            } else {
                kernels::sub(a, b, &mut out);
            }
            V(out)
        }
        (OpCode::MulVS | OpCode::DivVS, [V(a), S(s)]) => {
            let mut out = vec![0.0; a.len()];
            if op == OpCode::MulVS {
                kernels::mul_scalar(a, *s, &mut out);
            } else {
                kernels::div_scalar(a, *s, &mut out);
            }
            V(out)
        }
        (OpCode::DotVV, [V(a), V(b)]) => {
            same_dim(a, b)?;
            S(kernels::dot(a, b))
        }
        (OpCode::NormV, [V(a)]) => S(kernels::norm(a)),
        _ => return Err(bad()),
    })
}

fn check_inputs(
    n_hyper: usize,
    hyper: &[f64],
    x0: &[f64],
    x: &[f64],
    n: &[f64],
) -> Result<usize, ExecError> {
    if hyper.len() != n_hyper {
        return Err(ExecError::HyperCount { expected: n_hyper, got: hyper.len() });
    }
    let dim = x0.len();
    if dim == 0 {
        return Err(ExecError::ZeroDim);
    }
    for v in [x, n] {
        if v.len() != dim {
            return Err(ExecError::DimMismatch(dim, v.len()));
        }
    }
    Ok(dim)
}

/// Evaluates an SSA program directly, one storage cell per value.
pub fn run_ssa(
    p: &SsaProgram,
    hyper: &[f64],
    x0: &[f64],
    x: &[f64],
    n: &[f64],
) -> Result<Vec<f64>, ExecError> {
    let dim = check_inputs(p.hyperparams.len(), hyper, x0, x, n)?;
    let size = p.max_index() as usize + 1;
    let mut scalars = vec![0.0; size];
    let mut vectors: Vec<Vec<f64>> = vec![Vec::new(); size];
    for (h, &v) in p.hyperparams.iter().zip(hyper) {
        scalars[h.id.index as usize] = v;
    }
    for (id, v) in p.inputs.iter().zip([x0, x, n]) {
        vectors[id.index as usize] = v.to_vec();
    }
    for ins in &p.body {
        let a = ins.operands()[0].index as usize;
        let b = ins.operands()[ins.op.arity() - 1].index as usize;
        let d = ins.dest.index as usize;
        match ins.op {
            OpCode::AddSS => scalars[d] = scalars[a] + scalars[b],
            OpCode::SubSS => scalars[d] = scalars[a] - scalars[b],
            OpCode::MulSS => scalars[d] = scalars[a] * scalars[b],
            OpCode::DivSS => scalars[d] = scalars[a] / scalars[b],
            OpCode::DotVV => scalars[d] = kernels::dot(&vectors[a], &vectors[b]),
            OpCode::NormV => scalars[d] = kernels::norm(&vectors[a]),
            OpCode::AddVV | OpCode::SubVV | OpCode::MulVS | OpCode::DivVS => {
                let mut out = vec![0.0; dim];
                match ins.op {
                    OpCode::AddVV => kernels::add(&vectors[a], &vectors[b], &mut out),
                    OpCode::SubVV => kernels::sub(&vectors[a], &vectors[b], &mut out),
                    OpCode::MulVS => kernels::mul_scalar(&vectors[a], scalars[b], &mut out),
                    _ => kernels::div_scalar(&vectors[a], scalars[b], &mut out),
                }
                vectors[d] = out;
            }
        }
    }
    Ok(std::mem::take(&mut vectors[p.ret.index as usize]))
}

/// Scratch storage for executing compiled programs. One environment per
/// worker; reusing it across calls avoids per-evaluation allocation.
#[derive(Debug, Clone)]
pub struct ExecEnv {
    dim: usize,
    scalars: Vec<f64>,
    vectors: Vec<Vec<f64>>,
    scratch: Vec<f64>,
    ssa_out: Vec<f64>,
}

impl ExecEnv {
    pub fn new(dim: usize) -> Self {
        ExecEnv { dim, scalars: Vec::new(), vectors: Vec::new(), scratch: vec![0.0; dim], ssa_out: Vec::new() }
    }

    /// [`run_ssa`] with the result kept in this environment.
    pub fn run_ssa(
        &mut self,
        p: &SsaProgram,
        hyper: &[f64],
        x0: &[f64],
        x: &[f64],
        n: &[f64],
    ) -> Result<&[f64], ExecError> {
        self.ssa_out = run_ssa(p, hyper, x0, x, n)?;
        Ok(&self.ssa_out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Runs `p` and returns a view of the result slot.
    pub fn run_tac(
        &mut self,
        p: &TacProgram,
        hyper: &[f64],
        x0: &[f64],
        x: &[f64],
        n: &[f64],
    ) -> Result<&[f64], ExecError> {
        let dim = check_inputs(p.hyperparams.len(), hyper, x0, x, n)?;
        if dim != self.dim {
            *self = ExecEnv::new(dim);
        }
        self.scalars.clear();
        self.scalars.resize(p.n_scalar_slots as usize, 0.0);
        if self.vectors.len() < p.n_vector_slots as usize {
            self.vectors.resize(p.n_vector_slots as usize, vec![0.0; dim]);
        }
        for (h, &v) in p.hyperparams.iter().zip(hyper) {
            self.scalars[h.id.index as usize] = v;
        }
        for (slot, v) in p.inputs.iter().zip([x0, x, n]) {
            self.vectors[slot.index as usize].copy_from_slice(v);
        }
        let (scalars, vectors, scratch) = (&mut self.scalars, &mut self.vectors, &mut self.scratch);
        for ins in &p.body {
            let a = ins.operands()[0].index as usize;
            let b = ins.operands()[ins.op.arity() - 1].index as usize;
            let d = ins.dest.index as usize;
            match ins.op {
                OpCode::AddSS => scalars[d] = scalars[a] + scalars[b],
                OpCode::SubSS => scalars[d] = scalars[a] - scalars[b],
                OpCode::MulSS => scalars[d] = scalars[a] * scalars[b],
                OpCode::DivSS => scalars[d] = scalars[a] / scalars[b],
                OpCode::DotVV => scalars[d] = kernels::dot(&vectors[a], &vectors[b]),
                OpCode::NormV => scalars[d] = kernels::norm(&vectors[a]),
                OpCode::AddVV => kernels::add(&vectors[a], &vectors[b], scratch),
                OpCode::SubVV => kernels::sub(&vectors[a], &vectors[b], scratch),
                OpCode::MulVS => kernels::mul_scalar(&vectors[a], scalars[b], scratch),
                OpCode::DivVS => kernels::div_scalar(&vectors[a], scalars[b], scratch),
            }
            if ins.op.result() == Kind::Vector {
                // the destination may alias an operand, so results land in
                // scratch first
                std::mem::swap(&mut vectors[d], scratch);
            }
        }
        Ok(&self.vectors[p.ret.index as usize])
    }
}

pub fn run_tac(
    p: &TacProgram,
    hyper: &[f64],
    x0: &[f64],
    x: &[f64],
    n: &[f64],
) -> Result<Vec<f64>, ExecError> {
    let mut env = ExecEnv::new(x0.len());
    env.run_tac(p, hyper, x0, x, n).map(<[f64]>::to_vec)
}
