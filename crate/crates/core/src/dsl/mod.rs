//! The program language: opcodes, the SSA and TAC program forms, their
//! interpreters and their text format.

pub mod interp;
pub mod opcode;
pub mod program;
pub mod text;

pub use interp::{eval_op, run_ssa, run_tac, ExecEnv, ExecError, Value};
pub use opcode::{Kind, OpCode};
pub use program::{
    Hyperparam, Instr, ProgramError, Slot, SsaInstr, SsaProgram, TacInstr, TacProgram, ValueId,
    INPUT_ROLES,
};
pub use text::{format_program, format_tac, parse_program, parse_tac, ParseError};
