//! Line-oriented text form for programs.
//!
//! ```text
//! # comment
//! param s0 = 0.01
//! input v1
//! input v2
//! input v3
//! v4 = SUB(v1,v2)
//! return v4
//! ```
//!
//! Inputs are declared in the order `x0, x, n`. Mnemonics may be typed
//! (`SUB.VV`) or untyped (`SUB`); untyped ones are resolved from operand
//! kinds. Compiled programs use the same syntax with an optional leading
//! `slots <scalar> <vector>` line, and may reassign slots.

use std::fmt::Write as _;

use thiserror::Error;

use super::opcode::{Kind, OpCode};
use super::program::{
    Hyperparam, Instr, ProgramError, Slot, SsaInstr, SsaProgram, TacInstr, TacProgram, ValueId,
    INPUT_ROLES,
};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: syntax error: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: `{instr}`: no {name} operation takes operands of kinds {kinds:?}")]
    KindMismatch { line: usize, instr: String, name: String, kinds: Vec<Kind> },
    #[error("line {line}: `{instr}`: {id} is used before it is defined")]
    UseBeforeDef { line: usize, instr: String, id: String },
    #[error("line {line}: `{instr}`: {id} is already defined")]
    Redefinition { line: usize, instr: String, id: String },
    #[error("invalid program: {0}")]
    Invalid(#[from] ProgramError),
}

#[derive(Debug, Clone, Copy)]
struct Name {
    kind: Kind,
    index: u32,
}

enum Line<'a> {
    Slots(u32, u32),
    Param(Name, f64),
    Input(Name),
    Instr { dest: Name, mnemonic: &'a str, args: Vec<Name> },
    Return(Name),
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, msg: msg.into() }
}

fn parse_name(s: &str, line: usize) -> Result<Name, ParseError> {
    let s = s.trim();
    let mut chars = s.chars();
    let kind = chars
        .next()
        .and_then(Kind::from_prefix)
        .ok_or_else(|| syntax(line, format!("expected a value name like s0 or v3, found `{s}`")))?;
    let digits = chars.as_str();
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(syntax(line, format!("malformed value name `{s}`")));
    }
    let index = digits
        .parse()
        .map_err(|_| syntax(line, format!("index out of range in `{s}`")))?;
    Ok(Name { kind, index })
}

fn parse_line(text: &str, line: usize) -> Result<Option<Line<'_>>, ParseError> {
    let text = text.split('#').next().unwrap_or("").trim();
    if text.is_empty() {
        return Ok(None);
    }
    let (head, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    let rest = rest.trim();
    let parsed = match head {
        "slots" => {
            let nums: Vec<&str> = rest.split_whitespace().collect();
            let [s, v] = nums[..] else {
                return Err(syntax(line, "expected `slots <scalar> <vector>`"));
            };
            let parse = |t: &str| t.parse::<u32>().map_err(|_| syntax(line, format!("bad slot count `{t}`")));
            Line::Slots(parse(s)?, parse(v)?)
        }
        "param" => {
            let (name, value) = rest
                .split_once('=')
                .ok_or_else(|| syntax(line, "expected `param s<i> = <float>`"))?;
            let name = parse_name(name, line)?;
            let value = value
                .trim()
                .parse::<f64>()
                .map_err(|_| syntax(line, format!("bad float `{}`", value.trim())))?;
            Line::Param(name, value)
        }
        "input" => Line::Input(parse_name(rest, line)?),
        "return" => Line::Return(parse_name(rest, line)?),
        _ => {
            let (dest, expr) = text
                .split_once('=')
                .ok_or_else(|| syntax(line, format!("unrecognized line `{text}`")))?;
            let dest = parse_name(dest, line)?;
            let expr = expr.trim();
            let (mnemonic, args) = expr
                .strip_suffix(')')
                .and_then(|e| e.split_once('('))
                .ok_or_else(|| syntax(line, format!("expected `OP(args)`, found `{expr}`")))?;
            let args = args
                .split(',')
                .map(|a| parse_name(a, line))
                .collect::<Result<Vec<_>, _>>()?;
            if args.is_empty() || args.len() > 2 {
                return Err(syntax(line, "operations take one or two operands"));
            }
            Line::Instr { dest, mnemonic: mnemonic.trim(), args }
        }
    };
    Ok(Some(parsed))
}

fn resolve_op(
    mnemonic: &str,
    kinds: &[Kind],
    line: usize,
    instr: &str,
) -> Result<OpCode, ParseError> {
    let mismatch = |name: &str| ParseError::KindMismatch {
        line,
        instr: instr.to_string(),
        name: name.to_string(),
        kinds: kinds.to_vec(),
    };
    if let Some(op) = OpCode::from_mnemonic(mnemonic) {
        if op.params() == kinds {
            return Ok(op);
        }
        return Err(mismatch(mnemonic));
    }
    if OpCode::is_base_name(mnemonic) {
        return OpCode::resolve(mnemonic, kinds).ok_or_else(|| mismatch(mnemonic));
    }
    Err(syntax(line, format!("unknown operation `{mnemonic}`")))
}

#[derive(PartialEq, PartialOrd)]
enum Section {
    Slots,
    Params,
    Inputs,
    Body,
    Done,
}

/// Header and body shared by both forms, before form-specific checks.
struct Parsed<R> {
    slots: Option<(u32, u32)>,
    hyperparams: Vec<Hyperparam<R>>,
    inputs: Vec<R>,
    body: Vec<Instr<R>>,
    ret: Option<R>,
    last_line: usize,
}

fn parse_generic<R: Copy>(
    text: &str,
    allow_slots: bool,
    mut define: impl FnMut(Name, usize, &str) -> Result<R, ParseError>,
    mut lookup: impl FnMut(Name, usize, &str) -> Result<R, ParseError>,
) -> Result<Parsed<R>, ParseError> {
    let mut out = Parsed {
        slots: None,
        hyperparams: Vec::new(),
        inputs: Vec::new(),
        body: Vec::new(),
        ret: None,
        last_line: 0,
    };
    let mut section = Section::Slots;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        out.last_line = line;
        let Some(parsed) = parse_line(raw, line)? else { continue };
        let src = raw.split('#').next().unwrap_or("").trim();
        let order = |section: &mut Section, next: Section, what: &str| {
            if *section > next {
                return Err(syntax(line, format!("`{what}` is out of place")));
            }
            *section = next;
            Ok(())
        };
        match parsed {
            Line::Slots(s, v) => {
                if !allow_slots || section != Section::Slots || out.slots.is_some() {
                    return Err(syntax(line, "`slots` may only appear once, on the first line of compiled programs"));
                }
                out.slots = Some((s, v));
                section = Section::Params;
            }
            Line::Param(name, init) => {
                order(&mut section, Section::Params, "param")?;
                if name.kind != Kind::Scalar {
                    return Err(syntax(line, "hyperparameters must be scalars"));
                }
                let id = define(name, line, src)?;
                out.hyperparams.push(Hyperparam { id, init });
            }
            Line::Input(name) => {
                order(&mut section, Section::Inputs, "input")?;
                if name.kind != Kind::Vector {
                    return Err(syntax(line, "inputs must be vectors"));
                }
                if out.inputs.len() == 3 {
                    return Err(syntax(line, "exactly three inputs (x0, x, n) are allowed"));
                }
                out.inputs.push(define(name, line, src)?);
            }
            Line::Instr { dest, mnemonic, args } => {
                if out.inputs.len() != 3 {
                    return Err(syntax(line, "three inputs (x0, x, n) must precede instructions"));
                }
                order(&mut section, Section::Body, "instruction")?;
                let kinds: Vec<Kind> = args.iter().map(|a| a.kind).collect();
                let op = resolve_op(mnemonic, &kinds, line, src)?;
                if dest.kind != op.result() {
                    return Err(ParseError::KindMismatch {
                        line,
                        instr: src.to_string(),
                        name: mnemonic.to_string(),
                        kinds,
                    });
                }
                let operands = args
                    .iter()
                    .map(|&a| lookup(a, line, src))
                    .collect::<Result<Vec<_>, _>>()?;
                let dest = define(dest, line, src)?;
                out.body.push(Instr::new(dest, op, &operands));
            }
            Line::Return(name) => {
                order(&mut section, Section::Done, "return")?;
                section = Section::Done;
                if out.ret.is_some() {
                    return Err(syntax(line, "duplicate `return`"));
                }
                out.ret = Some(lookup(name, line, src)?);
            }
        }
    }
    if out.inputs.len() != 3 {
        return Err(syntax(out.last_line, "expected exactly three inputs (x0, x, n)"));
    }
    if out.ret.is_none() {
        return Err(syntax(out.last_line, "missing `return`"));
    }
    Ok(out)
}

pub fn parse_program(text: &str) -> Result<SsaProgram, ParseError> {
    use std::collections::HashMap;
    let defined = std::cell::RefCell::new(HashMap::<u32, Kind>::new());
    let parsed = parse_generic(
        text,
        false,
        |name, line, src| {
            let mut defined = defined.borrow_mut();
            let id = ValueId { index: name.index, kind: name.kind };
            if defined.insert(name.index, name.kind).is_some() {
                return Err(ParseError::Redefinition { line, instr: src.to_string(), id: id.to_string() });
            }
            Ok(id)
        },
        |name, line, src| {
            let id = ValueId { index: name.index, kind: name.kind };
            match defined.borrow().get(&name.index) {
                Some(&k) if k == name.kind => Ok(id),
                _ => Err(ParseError::UseBeforeDef { line, instr: src.to_string(), id: id.to_string() }),
            }
        },
    )?;
    let inputs = [parsed.inputs[0], parsed.inputs[1], parsed.inputs[2]];
    Ok(SsaProgram::new(parsed.hyperparams, inputs, parsed.body, parsed.ret.unwrap())?)
}

pub fn parse_tac(text: &str) -> Result<TacProgram, ParseError> {
    let slot = |name: Name, _: usize, _: &str| Ok(Slot { index: name.index, kind: name.kind });
    let parsed = parse_generic(text, true, slot, slot)?;
    let inputs = [parsed.inputs[0], parsed.inputs[1], parsed.inputs[2]];
    let (n_scalar_slots, n_vector_slots) = parsed.slots.unwrap_or_else(|| {
        let all = parsed
            .hyperparams
            .iter()
            .map(|h| h.id)
            .chain(inputs)
            .chain(parsed.body.iter().flat_map(|i| i.operands().iter().copied().chain([i.dest])));
        let mut counts = (0, 0);
        for s in all {
            match s.kind {
                Kind::Scalar => counts.0 = counts.0.max(s.index + 1),
                Kind::Vector => counts.1 = counts.1.max(s.index + 1),
            }
        }
        counts
    });
    let p = TacProgram {
        n_scalar_slots,
        n_vector_slots,
        hyperparams: parsed.hyperparams,
        inputs,
        body: parsed.body,
        ret: parsed.ret.unwrap(),
    };
    p.validate()?;
    Ok(p)
}

fn write_instr<R: std::fmt::Display + Copy>(out: &mut String, ins: &Instr<R>) {
    let args: Vec<String> = ins.operands().iter().map(|a| a.to_string()).collect();
    let _ = writeln!(out, "{} = {}({})", ins.dest, ins.op.base_name(), args.join(","));
}

/// Formats a float so that parsing it back yields the same bits.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

pub fn format_program(p: &SsaProgram) -> String {
    let mut out = String::new();
    for h in &p.hyperparams {
        let _ = writeln!(out, "param {} = {}", h.id, format_float(h.init));
    }
    for (id, role) in p.inputs.iter().zip(INPUT_ROLES) {
        let _ = writeln!(out, "input {id} # {role}");
    }
    for ins in &p.body {
        write_instr::<ValueId>(&mut out, ins as &SsaInstr);
    }
    let _ = writeln!(out, "return {}", p.ret);
    out
}

pub fn format_tac(p: &TacProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "slots {} {}", p.n_scalar_slots, p.n_vector_slots);
    for h in &p.hyperparams {
        let _ = writeln!(out, "param {} = {}", h.id, format_float(h.init));
    }
    for (slot, role) in p.inputs.iter().zip(INPUT_ROLES) {
        let _ = writeln!(out, "input {slot} # {role}");
    }
    for ins in &p.body {
        write_instr::<Slot>(&mut out, ins as &TacInstr);
    }
    let _ = writeln!(out, "return {}", p.ret);
    out
}
