use std::fmt;

/// Type of a DSL value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Scalar,
    Vector,
}

impl Kind {
    pub fn prefix(self) -> char {
        match self {
            Kind::Scalar => 's',
            Kind::Vector => 'v',
        }
    }

    pub fn from_prefix(c: char) -> Option<Kind> {
        match c {
            's' => Some(Kind::Scalar),
            'v' => Some(Kind::Vector),
            _ => None,
        }
    }
}

/// The ten DSL operations. The suffix names the operand kinds in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpCode {
    AddSS,
    SubSS,
    MulSS,
    DivSS,
    AddVV,
    SubVV,
    MulVS,
    DivVS,
    DotVV,
    NormV,
}

use Kind::{Scalar as S, Vector as V};

impl OpCode {
    pub const ALL: [OpCode; 10] = [
        OpCode::AddSS,
        OpCode::SubSS,
        OpCode::MulSS,
        OpCode::DivSS,
        OpCode::AddVV,
        OpCode::SubVV,
        OpCode::MulVS,
        OpCode::DivVS,
        OpCode::DotVV,
        OpCode::NormV,
    ];

    /// Operations producing a vector; the only legal final instructions.
    pub const VECTOR_RESULT: [OpCode; 4] =
        [OpCode::AddVV, OpCode::SubVV, OpCode::MulVS, OpCode::DivVS];

    pub fn params(self) -> &'static [Kind] {
        match self {
            OpCode::AddSS | OpCode::SubSS | OpCode::MulSS | OpCode::DivSS => &[S, S],
            OpCode::AddVV | OpCode::SubVV | OpCode::DotVV => &[V, V],
            OpCode::MulVS | OpCode::DivVS => &[V, S],
            OpCode::NormV => &[V],
        }
    }

    pub fn arity(self) -> usize {
        self.params().len()
    }

    pub fn result(self) -> Kind {
        match self {
            OpCode::AddVV | OpCode::SubVV | OpCode::MulVS | OpCode::DivVS => V,
            _ => S,
        }
    }

    /// Untyped mnemonic, as written in program listings (`ADD`, `NORM`, ...).
    pub fn base_name(self) -> &'static str {
        match self {
            OpCode::AddSS | OpCode::AddVV => "ADD",
            OpCode::SubSS | OpCode::SubVV => "SUB",
            OpCode::MulSS | OpCode::MulVS => "MUL",
            OpCode::DivSS | OpCode::DivVS => "DIV",
            OpCode::DotVV => "DOT",
            OpCode::NormV => "NORM",
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            OpCode::AddSS => "ADD.SS",
            OpCode::SubSS => "SUB.SS",
            OpCode::MulSS => "MUL.SS",
            OpCode::DivSS => "DIV.SS",
            OpCode::AddVV => "ADD.VV",
            OpCode::SubVV => "SUB.VV",
            OpCode::MulVS => "MUL.VS",
            OpCode::DivVS => "DIV.VS",
            OpCode::DotVV => "DOT.VV",
            OpCode::NormV => "NORM.V",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<OpCode> {
        OpCode::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Resolves an untyped mnemonic against operand kinds. At most one
    /// signature matches for any (name, kinds) pair.
    pub fn resolve(base: &str, kinds: &[Kind]) -> Option<OpCode> {
        OpCode::ALL
            .into_iter()
            .find(|op| op.base_name() == base && op.params() == kinds)
    }

    pub fn is_base_name(s: &str) -> bool {
        OpCode::ALL.into_iter().any(|op| op.base_name() == s)
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signatures() {
        let scalar: Vec<_> = OpCode::ALL
            .into_iter()
            .filter(|op| op.result() == Kind::Scalar)
            .collect();
        assert_eq!(
            scalar,
            vec![
                OpCode::AddSS,
                OpCode::SubSS,
                OpCode::MulSS,
                OpCode::DivSS,
                OpCode::DotVV,
                OpCode::NormV
            ]
        );
        for op in OpCode::VECTOR_RESULT {
            assert_eq!(op.result(), Kind::Vector);
        }
        assert_eq!(OpCode::NormV.arity(), 1);
        assert_eq!(OpCode::MulVS.params(), &[Kind::Vector, Kind::Scalar]);
    }

    #[test]
    fn untyped_resolution_is_unambiguous() {
        let kinds = [Kind::Scalar, Kind::Vector];
        for base in ["ADD", "SUB", "MUL", "DIV", "DOT", "NORM"] {
            for a in kinds {
                assert!(OpCode::resolve(base, &[a]).is_none() || base == "NORM");
                for b in kinds {
                    let n = OpCode::ALL
                        .into_iter()
                        .filter(|op| op.base_name() == base && op.params() == [a, b])
                        .count();
                    assert!(n <= 1);
                }
            }
        }
        assert_eq!(OpCode::resolve("ADD", &[Kind::Vector, Kind::Scalar]), None);
        assert_eq!(
            OpCode::resolve("DIV", &[Kind::Vector, Kind::Scalar]),
            Some(OpCode::DivVS)
        );
    }

    #[test]
    fn mnemonic_round_trip() {
        for op in OpCode::ALL {
            assert_eq!(OpCode::from_mnemonic(op.mnemonic()), Some(op));
        }
    }
}
