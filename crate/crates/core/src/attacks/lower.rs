//! Lowering of a handler expression to linear register code, the shape the
//! syntactic attacks work on.

use std::collections::HashMap;
use std::fmt;

use crate::expr::{BinOp, Expr, Node, UnOp, Var};
use crate::vm::STEP_BYTES;

pub type Reg = u32;

pub const REG_X: Reg = 0;
pub const REG_Y: Reg = 1;
pub const REG_C: Reg = 2;
pub const REG_K: Reg = 3;
/// VM instruction pointer, used only by the dispatcher tail.
pub const REG_IP: Reg = 4;
pub const FIRST_TEMP: Reg = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Reg(Reg),
    Imm(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LInstr {
    Mov {
        dst: Reg,
        src: Src,
    },
    Un {
        dst: Reg,
        op: UnOp,
        a: Reg,
    },
    Bin {
        dst: Reg,
        op: BinOp,
        a: Reg,
        b: Src,
    },
    /// Read `[addr + offset]` from VM memory (bytecode, pools).
    Load {
        dst: Reg,
        addr: Reg,
        offset: u64,
    },
    /// Read handler parameter `var` from `[addr]` into its register.
    Input {
        dst: Reg,
        var: Var,
        addr: Reg,
    },
    /// Write the result back to the register file.
    Store {
        addr: Reg,
        src: Reg,
    },
    Jump {
        target: Reg,
    },
}

impl LInstr {
    pub fn dst(&self) -> Option<Reg> {
        match *self {
            LInstr::Mov { dst, .. }
            | LInstr::Un { dst, .. }
            | LInstr::Bin { dst, .. }
            | LInstr::Load { dst, .. }
            | LInstr::Input { dst, .. } => Some(dst),
            LInstr::Store { .. } | LInstr::Jump { .. } => None,
        }
    }

    pub fn uses(&self) -> Vec<Reg> {
        let src = |s: &Src| match s {
            Src::Reg(r) => Some(*r),
            Src::Imm(_) => None,
        };
        match self {
            LInstr::Mov { src: s, .. } => src(s).into_iter().collect(),
            LInstr::Un { a, .. } => vec![*a],
            LInstr::Bin { a, b, .. } => std::iter::once(*a).chain(src(b)).collect(),
            LInstr::Load { addr, .. } | LInstr::Input { addr, .. } => vec![*addr],
            LInstr::Store { addr, src } => vec![*addr, *src],
            LInstr::Jump { target } => vec![*target],
        }
    }

    /// Computes a value from registers: part of the handler's semantics
    /// rather than VM plumbing or constant loads.
    pub fn is_compute(&self) -> bool {
        matches!(
            self,
            LInstr::Un { .. }
                | LInstr::Bin { .. }
                | LInstr::Mov {
                    src: Src::Reg(_),
                    ..
                }
        )
    }

    pub fn is_const_load(&self) -> bool {
        matches!(
            self,
            LInstr::Mov {
                src: Src::Imm(_),
                ..
            }
        )
    }
}

fn reg_name(r: Reg) -> String {
    match r {
        REG_X => "x".into(),
        REG_Y => "y".into(),
        REG_C => "c".into(),
        REG_K => "k".into(),
        REG_IP => "ip".into(),
        _ => format!("r{r}"),
    }
}

impl fmt::Display for Src {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Src::Reg(r) => write!(f, "{}", reg_name(*r)),
            Src::Imm(v) => write!(f, "{v:#x}"),
        }
    }
}

impl fmt::Display for LInstr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LInstr::Mov { dst, src } => write!(f, "mov {}, {src}", reg_name(*dst)),
            LInstr::Un { dst, op, a } => {
                write!(f, "{} {}, {}", op.mnemonic(), reg_name(*dst), reg_name(*a))
            }
            LInstr::Bin { dst, op, a, b } => write!(
                f,
                "{} {}, {}, {b}",
                op.mnemonic(),
                reg_name(*dst),
                reg_name(*a)
            ),
            LInstr::Load { dst, addr, offset } => write!(
                f,
                "load {}, [{} + {offset}]",
                reg_name(*dst),
                reg_name(*addr)
            ),
            LInstr::Input { dst, addr, .. } => {
                write!(f, "load {}, [{}]", reg_name(*dst), reg_name(*addr))
            }
            LInstr::Store { addr, src } => {
                write!(f, "store [{}], {}", reg_name(*addr), reg_name(*src))
            }
            LInstr::Jump { target } => write!(f, "jmp {}", reg_name(*target)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearCode {
    pub instrs: Vec<LInstr>,
    /// Register holding the handler result after the last instruction.
    pub output: Reg,
}

impl LinearCode {
    pub fn reg_count(&self) -> usize {
        let max = self
            .instrs
            .iter()
            .flat_map(|i| i.dst().into_iter().chain(i.uses()))
            .max()
            .unwrap_or(0);
        (max.max(self.output).max(REG_IP) + 1) as usize
    }

    /// Concrete execution; parameters read their values, other loads read
    /// zero.
    pub fn eval(&self, x: u64, y: u64, c: u64, k: u64) -> u64 {
        self.run(x, y, c, k, None)
    }

    /// Value written by each instruction (`None` for stores and jumps).
    pub fn trace(&self, x: u64, y: u64, c: u64, k: u64) -> Vec<Option<u64>> {
        let mut out = Vec::with_capacity(self.instrs.len());
        self.run(x, y, c, k, Some(&mut out));
        out
    }

    fn run(&self, x: u64, y: u64, c: u64, k: u64, mut trace: Option<&mut Vec<Option<u64>>>) -> u64 {
        let mut regs = vec![0u64; self.reg_count()];
        let input = |v: Var| match v {
            Var::X => x,
            Var::Y => y,
            Var::C => c,
            Var::K => k,
        };
        for v in Var::ALL {
            regs[var_reg(v) as usize] = input(v);
        }
        let get = |regs: &[u64], s: &Src| match s {
            Src::Reg(r) => regs[*r as usize],
            Src::Imm(v) => *v,
        };
        for i in &self.instrs {
            match i {
                LInstr::Mov { dst, src } => regs[*dst as usize] = get(&regs, src),
                LInstr::Un { dst, op, a } => regs[*dst as usize] = op.apply(regs[*a as usize]),
                LInstr::Bin { dst, op, a, b } => {
                    regs[*dst as usize] = op.apply(regs[*a as usize], get(&regs, b))
                }
                LInstr::Load { dst, .. } => regs[*dst as usize] = 0,
                LInstr::Input { dst, var, .. } => regs[*dst as usize] = input(*var),
                LInstr::Store { .. } | LInstr::Jump { .. } => {}
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(i.dst().map(|d| regs[d as usize]));
            }
        }
        regs[self.output as usize]
    }
}

impl fmt::Display for LinearCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.instrs {
            writeln!(f, "{i}")?;
        }
        write!(f, "; out {}", reg_name(self.output))
    }
}

pub fn var_reg(v: Var) -> Reg {
    match v {
        Var::X => REG_X,
        Var::Y => REG_Y,
        Var::C => REG_C,
        Var::K => REG_K,
    }
}

/// Step operand offsets, matching the bytecode step layout.
const OPERAND_OFFSETS: [(Var, u64); 4] = [(Var::X, 2), (Var::Y, 3), (Var::C, 6), (Var::K, 8)];
const OUT_OFFSET: u64 = 4;

/// A handler as compiled code: operand decode, one instruction per
/// non-constant DAG node, the result store and the dispatcher tail
/// (advance `ip`, fetch, jump). Constant subexpressions are folded into a
/// single load, key bytes become shift-and-mask on `k`.
pub fn lower(e: &Expr) -> LinearCode {
    let nodes = e.dag_nodes();
    let mut value: HashMap<u128, u64> = HashMap::new();
    for n in &nodes {
        let v = match n.node() {
            Node::Const(v) => Some(*v),
            Node::Unary(op, a) => value.get(&a.digest()).map(|&a| op.apply(a)),
            Node::Binary(op, a, b) => value
                .get(&a.digest())
                .zip(value.get(&b.digest()))
                .map(|(&a, &b)| op.apply(a, b)),
            _ => None,
        };
        if let Some(v) = v {
            value.insert(n.digest(), v);
        }
    }

    let mut instrs = Vec::new();
    let mut next = FIRST_TEMP;
    let mut fresh = || {
        next += 1;
        next - 1
    };
    for (v, off) in OPERAND_OFFSETS {
        let idx = fresh();
        instrs.push(LInstr::Load {
            dst: idx,
            addr: REG_IP,
            offset: off,
        });
        instrs.push(LInstr::Input {
            dst: var_reg(v),
            var: v,
            addr: idx,
        });
    }
    let mut reg_of: HashMap<u128, Reg> = HashMap::new();
    // Register of an operand; folded constants are loaded on first use.
    let operand = |x: &Expr,
                   reg_of: &mut HashMap<u128, Reg>,
                   instrs: &mut Vec<LInstr>,
                   fresh: &mut dyn FnMut() -> Reg|
     -> Reg {
        if let Some(&r) = reg_of.get(&x.digest()) {
            return r;
        }
        let dst = fresh();
        instrs.push(LInstr::Mov {
            dst,
            src: Src::Imm(value[&x.digest()]),
        });
        reg_of.insert(x.digest(), dst);
        dst
    };
    for n in &nodes {
        if value.contains_key(&n.digest()) {
            continue;
        }
        let r = match n.node() {
            Node::Var(v) => var_reg(*v),
            Node::KeyByte(i) => {
                let mut a = REG_K;
                if *i > 0 {
                    let dst = fresh();
                    instrs.push(LInstr::Bin {
                        dst,
                        op: BinOp::Shr,
                        a,
                        b: Src::Imm(8 * *i as u64),
                    });
                    a = dst;
                }
                let dst = fresh();
                instrs.push(LInstr::Bin {
                    dst,
                    op: BinOp::And,
                    a,
                    b: Src::Imm(0xff),
                });
                dst
            }
            Node::Unary(op, a) => {
                let a = operand(a, &mut reg_of, &mut instrs, &mut fresh);
                let dst = fresh();
                instrs.push(LInstr::Un { dst, op: *op, a });
                dst
            }
            Node::Binary(op, a, b) => {
                let a = operand(a, &mut reg_of, &mut instrs, &mut fresh);
                let b = operand(b, &mut reg_of, &mut instrs, &mut fresh);
                let dst = fresh();
                instrs.push(LInstr::Bin {
                    dst,
                    op: *op,
                    a,
                    b: Src::Reg(b),
                });
                dst
            }
            Node::Const(_) => unreachable!(),
        };
        reg_of.insert(n.digest(), r);
    }
    let output = operand(e, &mut reg_of, &mut instrs, &mut fresh);
    let out_idx = fresh();
    instrs.push(LInstr::Load {
        dst: out_idx,
        addr: REG_IP,
        offset: OUT_OFFSET,
    });
    instrs.push(LInstr::Store {
        addr: out_idx,
        src: output,
    });
    let t = fresh();
    instrs.push(LInstr::Bin {
        dst: REG_IP,
        op: BinOp::Add,
        a: REG_IP,
        b: Src::Imm(STEP_BYTES as u64),
    });
    instrs.push(LInstr::Load {
        dst: t,
        addr: REG_IP,
        offset: 0,
    });
    instrs.push(LInstr::Jump { target: t });
    LinearCode { instrs, output }
}
