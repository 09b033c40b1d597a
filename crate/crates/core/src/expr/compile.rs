//! Linearized, common-subexpression-eliminated form of an [`Expr`] for fast
//! scalar and batched evaluation.

use std::collections::HashMap;

use super::{divides, Assignment, BinOp, Expr, Node, UnOp, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instr {
    Var(Var),
    Const(u64),
    KeyByte(u8),
    Un(UnOp, u32),
    Bin(BinOp, u32, u32),
}

/// Straight-line evaluation program; the result is the last instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledExpr {
    instrs: Vec<Instr>,
}

/// Column-wise inputs for batch evaluation. Each column has either the batch
/// length or length 1 (broadcast). Columns for unused variables may be empty.
#[derive(Debug, Clone, Copy)]
pub struct Columns<'a> {
    pub x: &'a [u64],
    pub y: &'a [u64],
    pub c: &'a [u64],
    pub k: &'a [u64],
}

impl<'a> Columns<'a> {
    fn col(&self, v: Var) -> &'a [u64] {
        match v {
            Var::X => self.x,
            Var::Y => self.y,
            Var::C => self.c,
            Var::K => self.k,
        }
    }
}

const CHUNK: usize = 256;

impl CompiledExpr {
    pub fn new(e: &Expr) -> CompiledExpr {
        let nodes = e.dag_nodes();
        let mut ids: HashMap<u128, u32> = HashMap::with_capacity(nodes.len());
        let mut instrs = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let ins = match n.node() {
                Node::Var(v) => Instr::Var(*v),
                Node::Const(c) => Instr::Const(*c),
                Node::KeyByte(i) => Instr::KeyByte(*i),
                Node::Unary(op, a) => Instr::Un(*op, ids[&a.digest()]),
                Node::Binary(op, a, b) => Instr::Bin(*op, ids[&a.digest()], ids[&b.digest()]),
            };
            ids.insert(n.digest(), instrs.len() as u32);
            instrs.push(ins);
        }
        CompiledExpr { instrs }
    }

    pub fn instrs(&self) -> &[Instr] {
        &self.instrs
    }

    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Operator instructions (excluding leaves).
    pub fn op_count(&self) -> usize {
        self.instrs
            .iter()
            .filter(|i| matches!(i, Instr::Un(..) | Instr::Bin(..)))
            .count()
    }

    pub fn eval(&self, env: &Assignment) -> u64 {
        let mut s = Vec::with_capacity(self.instrs.len());
        self.eval_into(env, &mut s)
    }

    /// Scalar evaluation reusing `scratch`; afterwards `scratch[i]` holds
    /// the value of instruction `i`.
    pub fn eval_into(&self, env: &Assignment, scratch: &mut Vec<u64>) -> u64 {
        scratch.clear();
        for ins in &self.instrs {
            let v = match *ins {
                Instr::Var(v) => env.get(v),
                Instr::Const(c) => c,
                Instr::KeyByte(i) => (env.k >> (8 * i as u32)) & 0xff,
                Instr::Un(op, a) => op.apply(scratch[a as usize]),
                Instr::Bin(op, a, b) => op.apply(scratch[a as usize], scratch[b as usize]),
            };
            scratch.push(v);
        }
        *scratch.last().expect("compiled expression is never empty")
    }

    /// Evaluate over `out.len()` lanes.
    pub fn eval_batch(&self, cols: &Columns<'_>, out: &mut [u64]) {
        let n = out.len();
        let w = self.instrs.len();
        let mut scratch = vec![0u64; w * CHUNK.min(n.max(1))];
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            self.eval_chunk(cols, start, m, &mut scratch[..w * m]);
            out[start..start + m].copy_from_slice(&scratch[(w - 1) * m..w * m]);
            start += m;
        }
    }

    fn eval_chunk(&self, cols: &Columns<'_>, start: usize, m: usize, scratch: &mut [u64]) {
        for (i, ins) in self.instrs.iter().enumerate() {
            let (prev, rest) = scratch.split_at_mut(i * m);
            let cur = &mut rest[..m];
            match *ins {
                Instr::Var(v) => fill_col(cur, cols.col(v), start),
                Instr::Const(c) => cur.fill(c),
                Instr::KeyByte(b) => {
                    fill_col(cur, cols.k, start);
                    let sh = 8 * b as u32;
                    cur.iter_mut().for_each(|v| *v = (*v >> sh) & 0xff);
                }
                Instr::Un(op, a) => {
                    let a = &prev[a as usize * m..a as usize * m + m];
                    match op {
                        UnOp::Not => cur.iter_mut().zip(a).for_each(|(o, a)| *o = !a),
                        UnOp::Neg => cur
                            .iter_mut()
                            .zip(a)
                            .for_each(|(o, a)| *o = a.wrapping_neg()),
                    }
                }
                Instr::Bin(op, a, b) => {
                    let a = &prev[a as usize * m..a as usize * m + m];
                    let b = &prev[b as usize * m..b as usize * m + m];
                    macro_rules! lanes {
                        ($f:expr) => {
                            for j in 0..m {
                                cur[j] = $f(a[j], b[j]);
                            }
                        };
                    }
                    match op {
                        BinOp::Add => lanes!(|p: u64, q| p.wrapping_add(q)),
                        BinOp::Sub => lanes!(|p: u64, q| p.wrapping_sub(q)),
                        BinOp::Mul => lanes!(|p: u64, q| p.wrapping_mul(q)),
                        BinOp::And => lanes!(|p: u64, q| p & q),
                        BinOp::Or => lanes!(|p: u64, q| p | q),
                        BinOp::Xor => lanes!(|p: u64, q| p ^ q),
                        BinOp::Shl => lanes!(|p: u64, q: u64| p << (q & 63)),
                        BinOp::Shr => lanes!(|p: u64, q: u64| p >> (q & 63)),
                        BinOp::Divides => lanes!(divides),
                    }
                }
            }
        }
    }
}

fn fill_col(cur: &mut [u64], col: &[u64], start: usize) {
    match col.len() {
        0 => cur.fill(0),
        1 => cur.fill(col[0]),
        _ => cur.copy_from_slice(&col[start..start + cur.len()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_matches_scalar() {
        let (x, y, c) = (Expr::x(), Expr::y(), Expr::c());
        let e = ((x.clone() ^ y.clone()) + Expr::constant(2) * (x.clone() & y.clone()))
            * (c.clone() >> x.clone())
            - Expr::divides(Expr::constant(77), Expr::key_byte(0))
            + !(-y.clone() << c);
        let ce = CompiledExpr::new(&e);
        let n = 1000;
        let xs: Vec<u64> = (0..n)
            .map(|i| (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            .collect();
        let ys: Vec<u64> = (0..n).map(|i| (i as u64) * 31 + 7).collect();
        let cs: Vec<u64> = (0..n).map(|i| (i as u64) ^ 0x55).collect();
        let ks = [0x0b07u64];
        let mut out = vec![0; n];
        ce.eval_batch(
            &Columns {
                x: &xs,
                y: &ys,
                c: &cs,
                k: &ks,
            },
            &mut out,
        );
        for i in 0..n {
            let env = Assignment::new(xs[i], ys[i], cs[i], ks[0]);
            assert_eq!(out[i], e.eval(&env));
            assert_eq!(ce.eval(&env), out[i]);
        }
    }

    #[test]
    fn cse_shares_repeated_subtrees() {
        let s = Expr::x() + Expr::y();
        let e = (Expr::x() * s.clone()) | (Expr::x() + Expr::y());
        let ce = CompiledExpr::new(&e);
        assert_eq!(ce.op_count(), 3);
    }
}
