//! SMT-LIB2 (QF_BV) export. Every DAG node becomes one `define-fun`, so
//! query size is linear in the DAG rather than the tree.

use std::collections::HashMap;
use std::fmt::Write;

use super::{BinOp, Expr, Node, UnOp};

fn bv(c: u64) -> String {
    format!("#x{c:016x}")
}

fn emit(e: &Expr, prefix: &str, ids: &mut HashMap<u128, String>, out: &mut String) -> String {
    for (i, n) in e.dag_nodes().iter().enumerate() {
        if ids.contains_key(&n.digest()) {
            continue;
        }
        let body = match n.node() {
            Node::Var(v) => v.name().to_string(),
            Node::Const(c) => bv(*c),
            Node::KeyByte(b) => format!(
                "((_ zero_extend 56) ((_ extract {} {}) k))",
                8 * b + 7,
                8 * b
            ),
            Node::Unary(op, a) => {
                let f = match op {
                    UnOp::Not => "bvnot",
                    UnOp::Neg => "bvneg",
                };
                format!("({f} {})", ids[&a.digest()])
            }
            Node::Binary(op, a, b) => {
                let (a, b) = (&ids[&a.digest()], &ids[&b.digest()]);
                match op {
                    BinOp::Add => format!("(bvadd {a} {b})"),
                    BinOp::Sub => format!("(bvsub {a} {b})"),
                    BinOp::Mul => format!("(bvmul {a} {b})"),
                    BinOp::And => format!("(bvand {a} {b})"),
                    BinOp::Or => format!("(bvor {a} {b})"),
                    BinOp::Xor => format!("(bvxor {a} {b})"),
                    BinOp::Shl => format!("(bvshl {a} (bvand {b} {}))", bv(63)),
                    BinOp::Shr => format!("(bvlshr {a} (bvand {b} {}))", bv(63)),
                    BinOp::Divides => format!(
                        "(ite (and (bvugt {b} {one}) (distinct {b} {a}) (= (bvurem {a} {b}) {zero})) {one} {zero})",
                        one = bv(1),
                        zero = bv(0)
                    ),
                }
            }
        };
        let name = format!("{prefix}{i}");
        let _ = writeln!(out, "(define-fun {name} () (_ BitVec 64) {body})");
        ids.insert(n.digest(), name);
    }
    ids[&e.digest()].clone()
}

/// A query that is `unsat` iff `a` and `b` are equivalent.
pub fn smtlib_disequality(a: &Expr, b: &Expr) -> String {
    let mut out = String::from("(set-logic QF_BV)\n");
    for v in a.vars().union(b.vars()).iter() {
        let _ = writeln!(out, "(declare-const {} (_ BitVec 64))", v.name());
    }
    let mut ids = HashMap::new();
    let ra = emit(a, "a", &mut ids, &mut out);
    let rb = emit(b, "b", &mut ids, &mut out);
    let _ = writeln!(out, "(assert (distinct {ra} {rb}))\n(check-sat)");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    #[test]
    fn shared_nodes_emitted_once() {
        let a = parse_expr("(or (mul x (add x y)) (add x y))").unwrap();
        let b = parse_expr("(add x y)").unwrap();
        let q = smtlib_disequality(&a, &b);
        assert_eq!(q.matches("bvadd").count(), 1);
        assert_eq!(q.matches("declare-const").count(), 2);
        assert!(q.contains("(assert (distinct "));
    }
}
