//! Bit-vector expressions over the handler variables `x`, `y`, `c` and `k`.
//!
//! Nodes are reference counted and hash-consed by a 128-bit structural
//! digest, so equality, hashing and size queries are O(1). Rewritten handler
//! expressions share subtrees heavily; every traversal that can see such
//! expressions memoizes on the digest instead of walking the tree.

mod compile;
mod equiv;
mod normalize;
mod ops;
pub(crate) mod parse;
mod smt;

pub use compile::{Columns, CompiledExpr, Instr};
pub use equiv::{check_equiv, prove_equiv, EquivStrategy, EquivVerdict, EDGE_CASES};
pub use normalize::{normalize, simp_binary, simp_unary, Normalizer};
pub use parse::{parse_dag, parse_expr};
pub use smt::smtlib_disequality;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("variable `{0}` is not bound")]
    UnboundVariable(Var),
    #[error("narrow-domain check is unsound here: {0}")]
    NarrowingUnsound(String),
    #[error("exhaustive domain too large: {vars} variables at {bits} bits")]
    DomainTooLarge { vars: usize, bits: u32 },
    #[error("parse error at offset {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X,
    Y,
    C,
    K,
}

impl Var {
    pub const ALL: [Var; 4] = [Var::X, Var::Y, Var::C, Var::K];

    pub fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::C => "c",
            Var::K => "k",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Small bit set over [`Var`]. `KeyByte` leaves count as an occurrence of `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct VarSet(u8);

impl VarSet {
    pub const EMPTY: VarSet = VarSet(0);

    pub fn single(v: Var) -> Self {
        VarSet(1 << v.index())
    }
    pub fn contains(self, v: Var) -> bool {
        self.0 & (1 << v.index()) != 0
    }
    pub fn union(self, o: VarSet) -> VarSet {
        VarSet(self.0 | o.0)
    }
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }
    pub fn is_subset(self, o: VarSet) -> bool {
        self.0 & !o.0 == 0
    }
    pub fn iter(self) -> impl Iterator<Item = Var> {
        Var::ALL.into_iter().filter(move |v| self.contains(*v))
    }
}

impl FromIterator<Var> for VarSet {
    fn from_iter<I: IntoIterator<Item = Var>>(it: I) -> Self {
        it.into_iter()
            .fold(VarSet::EMPTY, |s, v| s.union(VarSet::single(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnOp {
    Not,
    Neg,
}

impl UnOp {
    pub const ALL: [UnOp; 2] = [UnOp::Not, UnOp::Neg];

    pub fn apply(self, a: u64) -> u64 {
        match self {
            UnOp::Not => !a,
            UnOp::Neg => a.wrapping_neg(),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            UnOp::Not => "not",
            UnOp::Neg => "neg",
        }
    }
}

/// Binary operators. `Divides(n, k)` is the native divisibility check used by
/// factorization key encodings: 1 iff `k` is a non-trivial divisor of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
    Divides,
}

impl BinOp {
    pub const ALL: [BinOp; 9] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
        BinOp::Divides,
    ];
    /// The eight operators of the straight-line IR.
    pub const ARITH_LOGIC: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Shr,
    ];

    #[inline]
    pub fn apply(self, a: u64, b: u64) -> u64 {
        match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => a << (b & 63),
            BinOp::Shr => a >> (b & 63),
            BinOp::Divides => divides(a, b),
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(
            self,
            BinOp::Add | BinOp::Mul | BinOp::And | BinOp::Or | BinOp::Xor
        )
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Shr => "shr",
            BinOp::Divides => "divides",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|o| o.mnemonic() == s)
    }
}

impl UnOp {
    pub fn from_mnemonic(s: &str) -> Option<UnOp> {
        UnOp::ALL.into_iter().find(|o| o.mnemonic() == s)
    }
}

/// `n mod k == 0` with the trivial divisors 1 and `n` (and 0) excluded.
#[inline]
pub fn divides(n: u64, k: u64) -> u64 {
    (k > 1 && k != n && n.is_multiple_of(k)) as u64
}

#[derive(Debug, Clone)]
pub enum Node {
    Var(Var),
    Const(u64),
    KeyByte(u8),
    Unary(UnOp, Expr),
    Binary(BinOp, Expr, Expr),
}

struct Inner {
    node: Node,
    digest: u128,
    size: u64,
    height: u32,
    ops: u64,
    vars: VarSet,
    has_const: bool,
}

#[derive(Clone)]
pub struct Expr(Arc<Inner>);

/// Concrete values for all four variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Assignment {
    pub x: u64,
    pub y: u64,
    pub c: u64,
    pub k: u64,
}

impl Assignment {
    pub fn new(x: u64, y: u64, c: u64, k: u64) -> Self {
        Assignment { x, y, c, k }
    }
    pub fn xy(x: u64, y: u64) -> Self {
        Assignment { x, y, c: 0, k: 0 }
    }
    pub fn get(&self, v: Var) -> u64 {
        match v {
            Var::X => self.x,
            Var::Y => self.y,
            Var::C => self.c,
            Var::K => self.k,
        }
    }
    pub fn set(&mut self, v: Var, val: u64) {
        match v {
            Var::X => self.x = val,
            Var::Y => self.y = val,
            Var::C => self.c = val,
            Var::K => self.k = val,
        }
    }
}

/// Partial variable binding, for callers that need `UnboundVariable` checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bindings {
    pub x: Option<u64>,
    pub y: Option<u64>,
    pub c: Option<u64>,
    pub k: Option<u64>,
}

impl Bindings {
    pub fn get(&self, v: Var) -> Option<u64> {
        match v {
            Var::X => self.x,
            Var::Y => self.y,
            Var::C => self.c,
            Var::K => self.k,
        }
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn digest_of(tag: u64, a: u128, b: u128) -> u128 {
    let (al, ah) = (a as u64, (a >> 64) as u64);
    let (bl, bh) = (b as u64, (b >> 64) as u64);
    let lo = mix64(
        mix64(mix64(tag ^ 0x9e37_79b9_7f4a_7c15) ^ al).wrapping_add(bl ^ 0x632b_e59b_d9b4_e019),
    );
    let hi =
        mix64(mix64(mix64(tag.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ ah) ^ lo).wrapping_add(bh));
    ((hi as u128) << 64) | lo as u128
}

const TAG_VAR: u64 = 1;
const TAG_CONST: u64 = 2;
const TAG_KEYBYTE: u64 = 3;
const TAG_UN: u64 = 16;
const TAG_BIN: u64 = 32;

impl Expr {
    fn from_node(node: Node) -> Expr {
        let (digest, size, height, ops, vars, has_const) = match &node {
            Node::Var(v) => (
                digest_of(TAG_VAR, v.index() as u128, 0),
                1,
                1,
                0,
                VarSet::single(*v),
                false,
            ),
            Node::Const(c) => (
                digest_of(TAG_CONST, *c as u128, 0),
                1,
                1,
                0,
                VarSet::EMPTY,
                true,
            ),
            Node::KeyByte(i) => (
                digest_of(TAG_KEYBYTE, *i as u128, 0),
                1,
                1,
                0,
                VarSet::single(Var::K),
                false,
            ),
            Node::Unary(op, a) => (
                digest_of(TAG_UN + *op as u64, a.digest(), 0),
                a.size().saturating_add(1),
                a.height() + 1,
                a.op_count().saturating_add(1),
                a.vars(),
                a.has_const(),
            ),
            Node::Binary(op, a, b) => (
                digest_of(TAG_BIN + *op as u64, a.digest(), b.digest()),
                a.size().saturating_add(b.size()).saturating_add(1),
                a.height().max(b.height()) + 1,
                a.op_count().saturating_add(b.op_count()).saturating_add(1),
                a.vars().union(b.vars()),
                a.has_const() || b.has_const(),
            ),
        };
        Expr(Arc::new(Inner {
            node,
            digest,
            size,
            height,
            ops,
            vars,
            has_const,
        }))
    }

    pub fn var(v: Var) -> Expr {
        Expr::from_node(Node::Var(v))
    }
    pub fn x() -> Expr {
        Expr::var(Var::X)
    }
    pub fn y() -> Expr {
        Expr::var(Var::Y)
    }
    pub fn c() -> Expr {
        Expr::var(Var::C)
    }
    pub fn k() -> Expr {
        Expr::var(Var::K)
    }
    pub fn constant(v: u64) -> Expr {
        Expr::from_node(Node::Const(v))
    }
    /// Byte `i` of `k` (little-endian, `i < 8`).
    pub fn key_byte(i: u8) -> Expr {
        assert!(i < 8, "key byte index out of range");
        Expr::from_node(Node::KeyByte(i))
    }
    pub fn unary(op: UnOp, a: Expr) -> Expr {
        Expr::from_node(Node::Unary(op, a))
    }
    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::from_node(Node::Binary(op, a, b))
    }
    pub fn divides(n: Expr, k: Expr) -> Expr {
        Expr::binary(BinOp::Divides, n, k)
    }

    pub fn node(&self) -> &Node {
        &self.0.node
    }
    pub fn digest(&self) -> u128 {
        self.0.digest
    }
    /// Tree node count (saturating). Equal to the syntactic depth.
    pub fn size(&self) -> u64 {
        self.0.size
    }
    pub fn height(&self) -> u32 {
        self.0.height
    }
    /// Operator occurrences in the tree (saturating).
    pub fn op_count(&self) -> u64 {
        self.0.ops
    }
    pub fn vars(&self) -> VarSet {
        self.0.vars
    }
    pub fn has_const(&self) -> bool {
        self.0.has_const
    }
    pub fn ptr_eq(&self, o: &Expr) -> bool {
        Arc::ptr_eq(&self.0, &o.0)
    }

    /// Number of variable occurrences plus operator occurrences, with
    /// constants counted as leaves.
    pub fn syntactic_depth(&self) -> u64 {
        self.size()
    }

    pub fn as_const(&self) -> Option<u64> {
        match self.node() {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }
    pub fn is_const(&self, v: u64) -> bool {
        self.as_const() == Some(v)
    }
    pub fn is_leaf(&self) -> bool {
        matches!(
            self.node(),
            Node::Var(_) | Node::Const(_) | Node::KeyByte(_)
        )
    }

    pub fn children(&self) -> Vec<&Expr> {
        match self.node() {
            Node::Unary(_, a) => vec![a],
            Node::Binary(_, a, b) => vec![a, b],
            _ => vec![],
        }
    }

    /// Rebuild this node with new children (same arity).
    pub fn with_children(&self, kids: &[Expr]) -> Expr {
        match self.node() {
            Node::Unary(op, _) => Expr::unary(*op, kids[0].clone()),
            Node::Binary(op, _, _) => Expr::binary(*op, kids[0].clone(), kids[1].clone()),
            _ => self.clone(),
        }
    }

    fn eval_tree(&self, env: &Assignment) -> u64 {
        match self.node() {
            Node::Var(v) => env.get(*v),
            Node::Const(c) => *c,
            Node::KeyByte(i) => (env.k >> (8 * *i as u32)) & 0xff,
            Node::Unary(op, a) => op.apply(a.eval_tree(env)),
            Node::Binary(op, a, b) => op.apply(a.eval_tree(env), b.eval_tree(env)),
        }
    }

    /// Evaluate under a full assignment. Large shared expressions are
    /// evaluated through a compiled DAG instead of the tree.
    pub fn eval(&self, env: &Assignment) -> u64 {
        if self.size() <= 4096 {
            self.eval_tree(env)
        } else {
            CompiledExpr::new(self).eval(env)
        }
    }

    /// Evaluate checking that every occurring variable is bound.
    pub fn try_eval(&self, env: &Bindings) -> Result<u64, ExprError> {
        let mut a = Assignment::default();
        for v in self.vars().iter() {
            a.set(v, env.get(v).ok_or(ExprError::UnboundVariable(v))?);
        }
        Ok(self.eval(&a))
    }

    /// Replace variables via `f`; `None` keeps the variable. Memoized on the
    /// DAG so shared subtrees stay shared.
    pub fn substitute(&self, f: &dyn Fn(Var) -> Option<Expr>) -> Expr {
        fn go(e: &Expr, f: &dyn Fn(Var) -> Option<Expr>, memo: &mut HashMap<u128, Expr>) -> Expr {
            if let Some(r) = memo.get(&e.digest()) {
                return r.clone();
            }
            let r = match e.node() {
                Node::Var(v) => f(*v).unwrap_or_else(|| e.clone()),
                Node::Const(_) | Node::KeyByte(_) => e.clone(),
                Node::Unary(op, a) => {
                    let na = go(a, f, memo);
                    if na.ptr_eq(a) {
                        e.clone()
                    } else {
                        Expr::unary(*op, na)
                    }
                }
                Node::Binary(op, a, b) => {
                    let (na, nb) = (go(a, f, memo), go(b, f, memo));
                    if na.ptr_eq(a) && nb.ptr_eq(b) {
                        e.clone()
                    } else {
                        Expr::binary(*op, na, nb)
                    }
                }
            };
            memo.insert(e.digest(), r.clone());
            r
        }
        go(self, f, &mut HashMap::new())
    }

    /// Substitute a concrete key: `k` and every `KeyByte` become constants.
    pub fn with_key(&self, k: u64) -> Expr {
        fn go(e: &Expr, k: u64, memo: &mut HashMap<u128, Expr>) -> Expr {
            if !e.vars().contains(Var::K) {
                return e.clone();
            }
            if let Some(r) = memo.get(&e.digest()) {
                return r.clone();
            }
            let r = match e.node() {
                Node::Var(Var::K) => Expr::constant(k),
                Node::KeyByte(i) => Expr::constant((k >> (8 * *i as u32)) & 0xff),
                Node::Unary(op, a) => Expr::unary(*op, go(a, k, memo)),
                Node::Binary(op, a, b) => Expr::binary(*op, go(a, k, memo), go(b, k, memo)),
                _ => e.clone(),
            };
            memo.insert(e.digest(), r.clone());
            r
        }
        go(self, k, &mut HashMap::new())
    }

    /// Distinct nodes of the DAG in post-order (children before parents).
    pub fn dag_nodes(&self) -> Vec<Expr> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        let mut stack: Vec<(Expr, bool)> = vec![(self.clone(), false)];
        while let Some((e, expanded)) = stack.pop() {
            if expanded {
                out.push(e);
                continue;
            }
            if !seen.insert(e.digest()) {
                continue;
            }
            stack.push((e.clone(), true));
            for c in e.children().into_iter().rev() {
                if !seen.contains(&c.digest()) {
                    stack.push((c.clone(), false));
                }
            }
        }
        out
    }

    /// Distinct operator nodes in the DAG.
    pub fn dag_op_count(&self) -> usize {
        self.dag_nodes().iter().filter(|e| !e.is_leaf()).count()
    }

    /// Whether any node satisfies `pred` (DAG traversal).
    pub fn any_node(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        self.dag_nodes().iter().any(pred)
    }

    /// Line-per-node serialization that preserves sharing:
    /// `<id> <op> <operand ids…>`, with the root last.
    pub fn to_dag_text(&self) -> String {
        let nodes = self.dag_nodes();
        let mut ids: HashMap<u128, usize> = HashMap::with_capacity(nodes.len());
        let mut out = String::new();
        for (i, n) in nodes.iter().enumerate() {
            let line = match n.node() {
                Node::Var(v) => format!("{i} {v}"),
                Node::Const(c) => format!("{i} const {}", fmt_const(*c)),
                Node::KeyByte(b) => format!("{i} keybyte {b}"),
                Node::Unary(op, a) => format!("{i} {} {}", op.mnemonic(), ids[&a.digest()]),
                Node::Binary(op, a, b) => format!(
                    "{i} {} {} {}",
                    op.mnemonic(),
                    ids[&a.digest()],
                    ids[&b.digest()]
                ),
            };
            ids.insert(n.digest(), i);
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    fn kind_rank(&self) -> u8 {
        match self.node() {
            Node::Const(_) => 0,
            Node::Var(_) => 1,
            Node::KeyByte(_) => 2,
            Node::Unary(..) => 3,
            Node::Binary(..) => 4,
        }
    }
}

pub(crate) fn fmt_const(c: u64) -> String {
    if c < 10_000 {
        c.to_string()
    } else {
        format!("{c:#x}")
    }
}

impl PartialEq for Expr {
    fn eq(&self, o: &Expr) -> bool {
        self.digest() == o.digest()
    }
}
impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, h: &mut H) {
        h.write_u128(self.digest())
    }
}

impl Ord for Expr {
    /// Canonical total order: node-kind rank, then operator rank, then
    /// children left to right.
    fn cmp(&self, o: &Expr) -> Ordering {
        if self.digest() == o.digest() {
            return Ordering::Equal;
        }
        let r = self.kind_rank().cmp(&o.kind_rank());
        if r != Ordering::Equal {
            return r;
        }
        match (self.node(), o.node()) {
            (Node::Const(a), Node::Const(b)) => a.cmp(b),
            (Node::Var(a), Node::Var(b)) => a.cmp(b),
            (Node::KeyByte(a), Node::KeyByte(b)) => a.cmp(b),
            (Node::Unary(p, a), Node::Unary(q, b)) => p.cmp(q).then_with(|| a.cmp(b)),
            (Node::Binary(p, a1, a2), Node::Binary(q, b1, b2)) => {
                p.cmp(q).then_with(|| a1.cmp(b1)).then_with(|| a2.cmp(b2))
            }
            _ => unreachable!("kind ranks matched"),
        }
    }
}
impl PartialOrd for Expr {
    fn partial_cmp(&self, o: &Expr) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl fmt::Display for Expr {
    /// Fully parenthesized prefix form. Exponential in the DAG depth for
    /// heavily shared expressions; use [`Expr::to_dag_text`] for those.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node() {
            Node::Var(v) => write!(f, "{v}"),
            Node::Const(c) => f.write_str(&fmt_const(*c)),
            Node::KeyByte(i) => write!(f, "(keybyte {i})"),
            Node::Unary(op, a) => write!(f, "({} {a})", op.mnemonic()),
            Node::Binary(op, a, b) => write!(f, "({} {a} {b})", op.mnemonic()),
        }
    }
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.size() <= 512 {
            write!(f, "{self}")
        } else {
            write!(
                f,
                "<expr size={} dag_ops={}>",
                self.size(),
                self.dag_op_count()
            )
        }
    }
}

impl std::str::FromStr for Expr {
    type Err = ExprError;
    fn from_str(s: &str) -> Result<Expr, ExprError> {
        parse_expr(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_examples() {
        let (x, y, c) = (Expr::x(), Expr::y(), Expr::c());
        assert_eq!((x.clone() + y.clone()).syntactic_depth(), 3);
        let e = x.clone() + y.clone() - x.clone() + c.clone() - c.clone();
        assert_eq!(e.syntactic_depth(), 9);
        let s = x.clone() + y.clone();
        let sup = (x.clone() * s.clone()) | s;
        assert_eq!(sup.syntactic_depth(), 9);
    }

    #[test]
    fn eval_examples() {
        let (x, y) = (Expr::x(), Expr::y());
        let env = Assignment::xy(2, 6);
        assert_eq!((x.clone() + y.clone()).eval(&env), 8);
        let mba = (x.clone() ^ y.clone()) + Expr::constant(2) * (x & y);
        assert_eq!(mba.eval(&env), 8);
        let e0 = ((Expr::constant(0xff) & Expr::k()) ^ Expr::constant(0xcd))
            * Expr::constant(0x28cb_fbeb_9a02_0a33);
        assert_eq!(e0.eval(&Assignment::new(0, 0, 0, 0xabcd)), 0);
        assert_eq!(e0.eval(&Assignment::new(0, 0, 0, 0x1336)), 1);
    }

    #[test]
    fn unbound_variable() {
        let e = Expr::x() + Expr::c();
        let b = Bindings {
            x: Some(1),
            ..Default::default()
        };
        assert!(matches!(
            e.try_eval(&b),
            Err(ExprError::UnboundVariable(Var::C))
        ));
    }

    #[test]
    fn divides_excludes_trivial() {
        assert_eq!(divides(15, 3), 1);
        assert_eq!(divides(15, 1), 0);
        assert_eq!(divides(15, 15), 0);
        assert_eq!(divides(15, 0), 0);
        assert_eq!(divides(15, 4), 0);
    }

    #[test]
    fn dag_text_round_trip_keeps_sharing() {
        let mut e = Expr::x() + Expr::y();
        for _ in 0..70 {
            e = e.clone() * e.clone() + Expr::key_byte(3);
        }
        assert_eq!(e.size(), u64::MAX);
        let t = e.to_dag_text();
        let back = parse_dag(&t).unwrap();
        assert_eq!(back, e);
        assert_eq!(back.dag_op_count(), e.dag_op_count());
    }

    #[test]
    fn with_key_folds_bytes() {
        let e = Expr::key_byte(1) + Expr::k();
        let f = e.with_key(0x1234);
        assert_eq!(f.eval(&Assignment::default()), 0x12 + 0x1234);
        assert!(!f.vars().contains(Var::K));
    }
}
