//! Bottom-up normalization: canonical operand order for commutative
//! operators, constant folding, identity and annihilator rules.
//!
//! The smart constructors [`simp_unary`] and [`simp_binary`] assume their
//! operands are already normalized and return a normalized node.

use std::collections::HashMap;

use super::{BinOp, Expr, Node, UnOp};

fn ordered(a: Expr, b: Expr) -> (Expr, Expr) {
    if b < a {
        (b, a)
    } else {
        (a, b)
    }
}

fn un_of(e: &Expr, op: UnOp) -> Option<&Expr> {
    match e.node() {
        Node::Unary(o, a) if *o == op => Some(a),
        _ => None,
    }
}

fn bin_of(e: &Expr, op: BinOp) -> Option<(&Expr, &Expr)> {
    match e.node() {
        Node::Binary(o, a, b) if *o == op => Some((a, b)),
        _ => None,
    }
}

/// `a` and `b` are `t` and `op t` in some order.
fn is_un_pair(a: &Expr, b: &Expr, op: UnOp) -> bool {
    un_of(a, op) == Some(b) || un_of(b, op) == Some(a)
}

pub fn simp_unary(op: UnOp, a: Expr) -> Expr {
    if let Some(c) = a.as_const() {
        return Expr::constant(op.apply(c));
    }
    match (op, a.node()) {
        (UnOp::Not, Node::Unary(UnOp::Not, t)) | (UnOp::Neg, Node::Unary(UnOp::Neg, t)) => {
            t.clone()
        }
        // ~(-t) = t - 1, -(~t) = t + 1
        (UnOp::Not, Node::Unary(UnOp::Neg, t)) => {
            simp_binary(BinOp::Add, Expr::constant(u64::MAX), t.clone())
        }
        (UnOp::Neg, Node::Unary(UnOp::Not, t)) => {
            simp_binary(BinOp::Add, Expr::constant(1), t.clone())
        }
        (UnOp::Neg, Node::Binary(BinOp::Sub, l, r)) => {
            simp_binary(BinOp::Sub, r.clone(), l.clone())
        }
        _ => Expr::unary(op, a),
    }
}

/// Associative-commutative ops: fold `c1 op (c2 op t)` and hoist constants
/// out of `a op (c op t)`.
fn ac_rules(op: BinOp, a: &Expr, b: &Expr) -> Option<Expr> {
    if let Some(c1) = a.as_const() {
        if let Some((l, r)) = bin_of(b, op) {
            if let Some(c2) = l.as_const() {
                return Some(simp_binary(op, Expr::constant(op.apply(c1, c2)), r.clone()));
            }
        }
        return None;
    }
    for (p, q) in [(a, b), (b, a)] {
        if let Some((l, r)) = bin_of(q, op) {
            if let Some(c) = l.as_const() {
                let inner = simp_binary(op, p.clone(), r.clone());
                return Some(simp_binary(op, Expr::constant(c), inner));
            }
        }
    }
    None
}

pub fn simp_binary(op: BinOp, a: Expr, b: Expr) -> Expr {
    if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
        return Expr::constant(op.apply(x, y));
    }
    let (a, b) = if op.is_commutative() {
        ordered(a, b)
    } else {
        (a, b)
    };
    match op {
        BinOp::Add => {
            if a.is_const(0) {
                return b;
            }
            if is_un_pair(&a, &b, UnOp::Neg) {
                return Expr::constant(0);
            }
            if is_un_pair(&a, &b, UnOp::Not) {
                return Expr::constant(u64::MAX);
            }
            // (t - b) + b = t
            for (p, q) in [(&a, &b), (&b, &a)] {
                if let Some((l, r)) = bin_of(p, BinOp::Sub) {
                    if r == q {
                        return l.clone();
                    }
                }
            }
            if let Some(e) = ac_rules(op, &a, &b) {
                return e;
            }
        }
        BinOp::Sub => {
            if b.is_const(0) {
                return a;
            }
            if a == b {
                return Expr::constant(0);
            }
            if let Some(c) = b.as_const() {
                return simp_binary(BinOp::Add, Expr::constant(c.wrapping_neg()), a);
            }
            if a.is_const(0) {
                return simp_unary(UnOp::Neg, b);
            }
            if let Some(t) = un_of(&b, UnOp::Neg) {
                return simp_binary(BinOp::Add, a, t.clone());
            }
            if let Some((l, r)) = bin_of(&a, BinOp::Add) {
                if r == &b {
                    return l.clone();
                }
                if l == &b {
                    return r.clone();
                }
            }
        }
        BinOp::Mul => {
            if a.is_const(0) {
                return a;
            }
            if a.is_const(1) {
                return b;
            }
            if a.is_const(u64::MAX) {
                return simp_unary(UnOp::Neg, b);
            }
            if let Some(e) = ac_rules(op, &a, &b) {
                return e;
            }
        }
        BinOp::And => {
            if a.is_const(0) {
                return a;
            }
            if a.is_const(u64::MAX) || a == b {
                return b;
            }
            if is_un_pair(&a, &b, UnOp::Not) {
                return Expr::constant(0);
            }
            if let Some(e) = ac_rules(op, &a, &b) {
                return e;
            }
        }
        BinOp::Or => {
            if a.is_const(0) || a == b {
                return b;
            }
            if a.is_const(u64::MAX) {
                return a;
            }
            if is_un_pair(&a, &b, UnOp::Not) {
                return Expr::constant(u64::MAX);
            }
            if let Some(e) = ac_rules(op, &a, &b) {
                return e;
            }
        }
        BinOp::Xor => {
            if a.is_const(0) {
                return b;
            }
            if a.is_const(u64::MAX) {
                return simp_unary(UnOp::Not, b);
            }
            if a == b {
                return Expr::constant(0);
            }
            if is_un_pair(&a, &b, UnOp::Not) {
                return Expr::constant(u64::MAX);
            }
            for (p, q) in [(&a, &b), (&b, &a)] {
                if let Some((l, r)) = bin_of(q, BinOp::Xor) {
                    if l == p {
                        return r.clone();
                    }
                    if r == p {
                        return l.clone();
                    }
                }
            }
            if let Some(e) = ac_rules(op, &a, &b) {
                return e;
            }
        }
        BinOp::Shl | BinOp::Shr => {
            if b.as_const().is_some_and(|c| c & 63 == 0) || a.is_const(0) {
                return a;
            }
        }
        BinOp::Divides => {}
    }
    Expr::binary(op, a, b)
}

/// Reusable normalizer; the memo is keyed by structural digest.
#[derive(Default)]
pub struct Normalizer {
    memo: HashMap<u128, Expr>,
}

impl Normalizer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pass(&mut self, e: &Expr) -> Expr {
        if e.is_leaf() {
            return e.clone();
        }
        if let Some(r) = self.memo.get(&e.digest()) {
            return r.clone();
        }
        let r = match e.node() {
            Node::Unary(op, a) => {
                let a = self.pass(a);
                simp_unary(*op, a)
            }
            Node::Binary(op, a, b) => {
                let a = self.pass(a);
                let b = self.pass(b);
                simp_binary(*op, a, b)
            }
            _ => unreachable!(),
        };
        self.memo.insert(e.digest(), r.clone());
        r
    }

    /// Iterate passes to a fixed point.
    pub fn normalize(&mut self, e: &Expr) -> Expr {
        let mut cur = self.pass(e);
        for _ in 0..16 {
            let next = self.pass(&cur);
            if next == cur {
                break;
            }
            cur = next;
        }
        cur
    }
}

pub fn normalize(e: &Expr) -> Expr {
    Normalizer::new().normalize(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn n(s: &str) -> String {
        normalize(&parse_expr(s).unwrap()).to_string()
    }

    #[test]
    fn examples() {
        let (x, y) = (Expr::x(), Expr::y());
        assert_eq!(normalize(&(x.clone() + y.clone() - y.clone())), x);
        assert_eq!(normalize(&(y.clone() + x.clone())).to_string(), "(add x y)");
        let e = (Expr::constant(3) + Expr::constant(4)) * x;
        assert_eq!(normalize(&e).to_string(), "(mul 7 x)");
    }

    #[test]
    fn identities() {
        assert_eq!(n("(add x 0)"), "x");
        assert_eq!(n("(mul x 1)"), "x");
        assert_eq!(n("(mul x 0)"), "0");
        assert_eq!(n("(and x 0)"), "0");
        assert_eq!(n("(or 0 x)"), "x");
        assert_eq!(n("(xor y y)"), "0");
        assert_eq!(n("(sub x x)"), "0");
        assert_eq!(n("(and x x)"), "x");
        assert_eq!(n("(or x x)"), "x");
        assert_eq!(n("(not (not x))"), "x");
        assert_eq!(n("(neg (neg x))"), "x");
        assert_eq!(n("(add (add x 32) 16)"), "(add 48 x)");
        assert_eq!(n("(xor x (xor y x))"), "y");
    }
}
