//! Straight-line three-address code over 64-bit unsigned integers.
//!
//! ```text
//! func f(a, b) {
//!   d = a + b        # comments run to end of line
//!   b = a * d; d = b | d
//!   return d
//! }
//! ```

mod parse;
mod ssa;

pub use parse::parse_tac;
pub use ssa::{to_ssa, Def, SsaProgram};

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::expr::{fmt_const, BinOp, UnOp};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IrError {
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax {
        line: usize,
        col: usize,
        msg: String,
    },
    #[error("{line}:{col}: `{name}` used before assignment")]
    UseBeforeDef {
        name: String,
        line: usize,
        col: usize,
    },
    #[error("{line}:{col}: unknown operator `{op}`")]
    UnknownOp { op: String, line: usize, col: usize },
    #[error("expected {expected} arguments, got {got}")]
    ArityMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Var(String),
    Const(u64),
}

impl Operand {
    pub fn var(s: &str) -> Operand {
        Operand::Var(s.to_string())
    }
    pub fn as_var(&self) -> Option<&str> {
        match self {
            Operand::Var(v) => Some(v),
            Operand::Const(_) => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Var(v) => f.write_str(v),
            Operand::Const(c) => f.write_str(&fmt_const(*c)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TacOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Not,
    Neg,
    Mov,
}

impl TacOp {
    pub fn arity(self) -> usize {
        match self {
            TacOp::Not | TacOp::Neg | TacOp::Mov => 1,
            _ => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            TacOp::Add => "+",
            TacOp::Sub | TacOp::Neg => "-",
            TacOp::Mul => "*",
            TacOp::And => "&",
            TacOp::Or => "|",
            TacOp::Xor => "^",
            TacOp::Shl => "<<",
            TacOp::Shr => ">>",
            TacOp::Not => "~",
            TacOp::Mov => "",
        }
    }

    pub fn binop(self) -> Option<BinOp> {
        Some(match self {
            TacOp::Add => BinOp::Add,
            TacOp::Sub => BinOp::Sub,
            TacOp::Mul => BinOp::Mul,
            TacOp::And => BinOp::And,
            TacOp::Or => BinOp::Or,
            TacOp::Xor => BinOp::Xor,
            TacOp::Shl => BinOp::Shl,
            TacOp::Shr => BinOp::Shr,
            _ => return None,
        })
    }

    pub fn unop(self) -> Option<UnOp> {
        match self {
            TacOp::Not => Some(UnOp::Not),
            TacOp::Neg => Some(UnOp::Neg),
            _ => None,
        }
    }

    pub fn from_binop(op: BinOp) -> Option<TacOp> {
        [
            TacOp::Add,
            TacOp::Sub,
            TacOp::Mul,
            TacOp::And,
            TacOp::Or,
            TacOp::Xor,
            TacOp::Shl,
            TacOp::Shr,
        ]
        .into_iter()
        .find(|t| t.binop() == Some(op))
    }

    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            TacOp::Mov => a,
            _ => match (self.binop(), self.unop()) {
                (Some(op), _) => op.apply(a, b),
                (_, Some(op)) => op.apply(a),
                _ => unreachable!(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TacInstr {
    pub dest: String,
    pub op: TacOp,
    pub lhs: Operand,
    pub rhs: Option<Operand>,
}

impl TacInstr {
    pub fn bin(dest: &str, op: TacOp, lhs: Operand, rhs: Operand) -> TacInstr {
        TacInstr {
            dest: dest.into(),
            op,
            lhs,
            rhs: Some(rhs),
        }
    }
    pub fn un(dest: &str, op: TacOp, lhs: Operand) -> TacInstr {
        TacInstr {
            dest: dest.into(),
            op,
            lhs,
            rhs: None,
        }
    }
    pub fn operands(&self) -> impl Iterator<Item = &Operand> {
        std::iter::once(&self.lhs).chain(self.rhs.iter())
    }
}

impl fmt::Display for TacInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.op, &self.rhs) {
            (TacOp::Mov, _) => write!(f, "{} = {}", self.dest, self.lhs),
            (op, None) => write!(f, "{} = {}{}", self.dest, op.symbol(), self.lhs),
            (op, Some(r)) => write!(f, "{} = {} {} {}", self.dest, self.lhs, op.symbol(), r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TacProgram {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<TacInstr>,
    pub ret: String,
}

impl fmt::Display for TacProgram {
    /// Canonical rendering; `parse_tac` reads it back to an equal program.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "func {}({}) {{", self.name, self.params.join(", "))?;
        for i in &self.body {
            writeln!(f, "  {i}")?;
        }
        writeln!(f, "  return {}", self.ret)?;
        writeln!(f, "}}")
    }
}

impl TacProgram {
    /// Check the def-before-use and return invariants.
    pub fn validate(&self) -> Result<(), IrError> {
        let mut defined: std::collections::HashSet<&str> =
            self.params.iter().map(|s| s.as_str()).collect();
        for (n, ins) in self.body.iter().enumerate() {
            if ins.op.arity() != ins.operands().count() {
                return Err(IrError::Syntax {
                    line: n + 1,
                    col: 1,
                    msg: format!("arity mismatch in `{ins}`"),
                });
            }
            for o in ins.operands() {
                if let Operand::Var(v) = o {
                    if !defined.contains(v.as_str()) {
                        return Err(IrError::UseBeforeDef {
                            name: v.clone(),
                            line: n + 1,
                            col: 1,
                        });
                    }
                }
            }
            defined.insert(&ins.dest);
        }
        if !defined.contains(self.ret.as_str()) {
            return Err(IrError::UseBeforeDef {
                name: self.ret.clone(),
                line: self.body.len() + 1,
                col: 1,
            });
        }
        Ok(())
    }

    pub fn compile(&self) -> CompiledTac {
        CompiledTac::new(self)
    }
}

pub fn eval_tac(p: &TacProgram, args: &[u64]) -> Result<u64, IrError> {
    p.compile().eval(args)
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Reg(usize),
    Imm(u64),
}

/// Name-resolved program for repeated evaluation.
#[derive(Debug, Clone)]
pub struct CompiledTac {
    n_params: usize,
    n_regs: usize,
    body: Vec<(TacOp, usize, Slot, Slot)>,
    ret: usize,
}

impl CompiledTac {
    fn new(p: &TacProgram) -> CompiledTac {
        let mut regs: HashMap<&str, usize> = HashMap::new();
        for (i, a) in p.params.iter().enumerate() {
            regs.insert(a, i);
        }
        let mut n = p.params.len();
        let slot = |o: &Operand, regs: &HashMap<&str, usize>| match o {
            Operand::Var(v) => Slot::Reg(regs[v.as_str()]),
            Operand::Const(c) => Slot::Imm(*c),
        };
        let mut body = Vec::with_capacity(p.body.len());
        for ins in &p.body {
            let l = slot(&ins.lhs, &regs);
            let r = ins
                .rhs
                .as_ref()
                .map(|o| slot(o, &regs))
                .unwrap_or(Slot::Imm(0));
            let d = *regs.entry(&ins.dest).or_insert_with(|| {
                n += 1;
                n - 1
            });
            body.push((ins.op, d, l, r));
        }
        CompiledTac {
            n_params: p.params.len(),
            n_regs: n,
            body,
            ret: regs[p.ret.as_str()],
        }
    }

    pub fn eval(&self, args: &[u64]) -> Result<u64, IrError> {
        if args.len() != self.n_params {
            return Err(IrError::ArityMismatch {
                expected: self.n_params,
                got: args.len(),
            });
        }
        let mut r = vec![0u64; self.n_regs];
        r[..args.len()].copy_from_slice(args);
        for &(op, d, l, rr) in &self.body {
            let get = |s: Slot, r: &[u64]| match s {
                Slot::Reg(i) => r[i],
                Slot::Imm(c) => c,
            };
            r[d] = op.apply(get(l, &r), get(rr, &r));
        }
        Ok(r[self.ret])
    }
}
