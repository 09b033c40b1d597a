//! Symbolic execution of lowered handlers plus a rule-based MBA
//! simplifier.

use std::collections::HashMap;
use std::time::Instant;

use super::lower::{lower, LInstr, LinearCode, Src, REG_C, REG_K, REG_X, REG_Y};
use super::{scores_as_simplified, AttackKind, AttackReport, AttackTarget};
use crate::expr::{normalize, parse_expr, simp_binary, simp_unary, BinOp, Expr, Node, UnOp, Var};
use crate::rewrite::Rewriter;

/// Run the code over expressions. `k = Some(v)` substitutes the observed
/// key. Constant propagation and the normalizer's identities apply as each
/// instruction executes.
pub fn symbolic_execute(code: &LinearCode, k: Option<u64>) -> Expr {
    let mut regs: Vec<Option<Expr>> = vec![None; code.reg_count()];
    regs[REG_X as usize] = Some(Expr::x());
    regs[REG_Y as usize] = Some(Expr::y());
    regs[REG_C as usize] = Some(Expr::c());
    regs[REG_K as usize] = Some(k.map_or_else(Expr::k, Expr::constant));
    let get = |regs: &[Option<Expr>], s: &Src| match s {
        Src::Reg(r) => regs[*r as usize]
            .clone()
            .unwrap_or_else(|| Expr::constant(0)),
        Src::Imm(v) => Expr::constant(*v),
    };
    for i in &code.instrs {
        match i {
            LInstr::Mov { dst, src } => regs[*dst as usize] = Some(get(&regs, src)),
            LInstr::Un { dst, op, a } => {
                regs[*dst as usize] = Some(simp_unary(*op, get(&regs, &Src::Reg(*a))))
            }
            LInstr::Bin { dst, op, a, b } => {
                let v = simp_binary(*op, get(&regs, &Src::Reg(*a)), get(&regs, b));
                regs[*dst as usize] = Some(v);
            }
            LInstr::Load { dst, .. } => regs[*dst as usize] = None,
            LInstr::Input { dst, var, .. } => {
                regs[*dst as usize] = Some(match (var, k) {
                    (Var::K, Some(v)) => Expr::constant(v),
                    _ => Expr::var(*var),
                })
            }
            LInstr::Store { .. } | LInstr::Jump { .. } => {}
        }
    }
    regs[code.output as usize]
        .clone()
        .unwrap_or_else(|| Expr::constant(0))
}

/// `lhs -> rhs` over the pattern variables `x`, `y`, `c`.
#[derive(Debug, Clone)]
pub struct Rule {
    pub name: String,
    pub lhs: Expr,
    pub rhs: Expr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Root {
    Un(UnOp),
    Bin(BinOp),
}

fn root_of(e: &Expr) -> Option<Root> {
    match e.node() {
        Node::Unary(op, _) => Some(Root::Un(*op)),
        Node::Binary(op, ..) => Some(Root::Bin(*op)),
        _ => None,
    }
}

const IDENTITIES: &[(&str, &str, &str)] = &[
    (
        "add-xor-and",
        "(add (xor x y) (mul 2 (and x y)))",
        "(add x y)",
    ),
    (
        "add-xor-and-shl",
        "(add (xor x y) (shl (and x y) 1))",
        "(add x y)",
    ),
    ("add-or-and", "(add (or x y) (and x y))", "(add x y)"),
    (
        "add-or-or-xor",
        "(sub (mul 2 (or x y)) (xor x y))",
        "(add x y)",
    ),
    ("xor-or-and", "(sub (or x y) (and x y))", "(xor x y)"),
    (
        "xor-add-and",
        "(sub (add x y) (mul 2 (and x y)))",
        "(xor x y)",
    ),
    ("or-add-and", "(sub (add x y) (and x y))", "(or x y)"),
    ("or-and-xor", "(add (and x y) (xor x y))", "(or x y)"),
    ("or-andnot", "(add (and x (not y)) y)", "(or x y)"),
    ("and-add-or", "(sub (add x y) (or x y))", "(and x y)"),
    ("and-or-xor", "(sub (or x y) (xor x y))", "(and x y)"),
    ("andnot-sub", "(sub x (and x y))", "(and x (not y))"),
    ("andnot-or", "(sub (or x y) y)", "(and x (not y))"),
    ("andnot-xor", "(xor (or x y) y)", "(and x (not y))"),
    ("demorgan-and", "(and (not x) (not y))", "(not (or x y))"),
    ("demorgan-or", "(or (not x) (not y))", "(not (and x y))"),
    ("absorb-and", "(and x (or x y))", "x"),
    ("absorb-or", "(or x (and x y))", "x"),
    ("neg-not", "(add (not x) 1)", "(neg x)"),
    (
        "dist-mul-add",
        "(add (mul x y) (mul x c))",
        "(mul x (add y c))",
    ),
    (
        "dist-mul-sub",
        "(sub (mul x y) (mul x c))",
        "(mul x (sub y c))",
    ),
    (
        "dist-and-or",
        "(or (and x y) (and x c))",
        "(and x (or y c))",
    ),
    (
        "dist-and-xor",
        "(xor (and x y) (and x c))",
        "(and x (xor y c))",
    ),
    ("dist-or-and", "(and (or x y) (or x c))", "(or x (and y c))"),
];

#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    by_root: HashMap<Root, Vec<Rule>>,
    len: usize,
}

impl RuleSet {
    pub fn empty() -> RuleSet {
        RuleSet::default()
    }

    /// Hand-written identity library.
    pub fn identities() -> RuleSet {
        let mut rs = RuleSet::default();
        for (name, lhs, rhs) in IDENTITIES {
            rs.push(Rule {
                name: name.to_string(),
                lhs: parse_expr(lhs).unwrap(),
                rhs: parse_expr(rhs).unwrap(),
            });
        }
        rs
    }

    /// Identities plus the `n` smallest inverses `member -> op(x, y)` known
    /// from the class database.
    pub fn with_db_inverses(rw: &Rewriter, n: usize) -> RuleSet {
        let mut rs = RuleSet::identities();
        let (x, y) = (Expr::x(), Expr::y());
        let pats = BinOp::ARITH_LOGIC
            .iter()
            .map(|o| Expr::binary(*o, x.clone(), y.clone()))
            .chain(UnOp::ALL.iter().map(|o| Expr::unary(*o, x.clone())));
        let mut cands: Vec<(u64, String, Rule)> = Vec::new();
        for p in pats {
            for m in rw.members_for(&p).unwrap_or(&[]) {
                if m.size() > p.size() {
                    let name = format!("db:{m}");
                    cands.push((
                        m.size(),
                        name.clone(),
                        Rule {
                            name,
                            lhs: m.clone(),
                            rhs: p.clone(),
                        },
                    ));
                }
            }
        }
        cands.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
        for (_, _, r) in cands.into_iter().take(n) {
            rs.push(r);
        }
        rs
    }

    pub fn push(&mut self, r: Rule) {
        let lhs = normalize(&r.lhs);
        let root = root_of(&lhs).expect("rule lhs must be an operator");
        self.by_root
            .entry(root)
            .or_default()
            .push(Rule { lhs, ..r });
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.by_root.values().flatten()
    }
}

type Binds = [Option<Expr>; 3];

fn slot(v: Var) -> Option<usize> {
    match v {
        Var::X => Some(0),
        Var::Y => Some(1),
        Var::C => Some(2),
        Var::K => None,
    }
}

/// Match modulo commutativity of the root of each pattern node.
fn matches(p: &Expr, e: &Expr, b: &mut Binds) -> bool {
    match p.node() {
        Node::Var(v) => {
            let Some(i) = slot(*v) else { return p == e };
            match &b[i] {
                Some(t) => t == e,
                None => {
                    b[i] = Some(e.clone());
                    true
                }
            }
        }
        Node::Const(c) => e.is_const(*c),
        Node::KeyByte(_) => p == e,
        Node::Unary(op, pa) => {
            matches!(e.node(), Node::Unary(o, ea) if o == op && matches(pa, ea, b))
        }
        Node::Binary(op, pa, pb) => {
            let Node::Binary(o, ea, eb) = e.node() else {
                return false;
            };
            if o != op {
                return false;
            }
            let saved = b.clone();
            if matches(pa, ea, b) && matches(pb, eb, b) {
                return true;
            }
            if op.is_commutative() {
                *b = saved;
                if matches(pa, eb, b) && matches(pb, ea, b) {
                    return true;
                }
            }
            false
        }
    }
}

fn build(p: &Expr, b: &Binds) -> Expr {
    match p.node() {
        Node::Var(v) => slot(*v)
            .and_then(|i| b[i].clone())
            .unwrap_or_else(|| p.clone()),
        Node::Const(_) | Node::KeyByte(_) => p.clone(),
        Node::Unary(op, a) => simp_unary(*op, build(a, b)),
        Node::Binary(op, l, r) => simp_binary(*op, build(l, b), build(r, b)),
    }
}

struct Engine<'a> {
    rules: &'a RuleSet,
    memo: HashMap<u128, Expr>,
    steps: u64,
    max: u64,
}

impl Engine<'_> {
    fn simp(&mut self, e: &Expr) -> Expr {
        if e.is_leaf() {
            return e.clone();
        }
        if let Some(r) = self.memo.get(&e.digest()) {
            return r.clone();
        }
        let node = match e.node() {
            Node::Unary(op, a) => {
                let a = self.simp(a);
                simp_unary(*op, a)
            }
            Node::Binary(op, a, b) => {
                let a = self.simp(a);
                let b = self.simp(b);
                simp_binary(*op, a, b)
            }
            _ => unreachable!(),
        };
        let out = match self.rewrite_root(&node) {
            Some(next) => self.simp(&next),
            None => node,
        };
        self.memo.insert(e.digest(), out.clone());
        self.memo.insert(out.digest(), out.clone());
        out
    }

    fn rewrite_root(&mut self, e: &Expr) -> Option<Expr> {
        if self.steps >= self.max {
            return None;
        }
        for r in self.rules.by_root.get(&root_of(e)?)? {
            let mut b: Binds = [None, None, None];
            if matches(&r.lhs, e, &mut b) {
                self.steps += 1;
                return Some(build(&r.rhs, &b));
            }
        }
        None
    }
}

/// Bottom-up rewriting to a fixed point or until `max_steps` rule
/// applications. Returns the result, the steps spent and whether the
/// budget ran out.
pub fn simplify_with_rules(e: &Expr, rules: &RuleSet, max_steps: u64) -> (Expr, u64, bool) {
    let mut eng = Engine {
        rules,
        memo: HashMap::new(),
        steps: 0,
        max: max_steps,
    };
    let mut cur = normalize(e);
    loop {
        let before = eng.steps;
        eng.memo.clear();
        let next = normalize(&eng.simp(&cur));
        let done = next == cur || eng.steps == before || eng.steps >= max_steps;
        cur = next;
        if done {
            break;
        }
    }
    (cur, eng.steps, eng.steps >= max_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymexBudget {
    /// Maximum rule applications.
    pub steps: u64,
}

impl Default for SymexBudget {
    fn default() -> Self {
        SymexBudget { steps: 100_000 }
    }
}

/// Static mode keeps `k` symbolic, so every slot stays in the expression.
/// Dynamic mode substitutes the observed key first: key encodings fold to
/// 0 or 1 and foreign slots vanish.
pub fn symex_simplify(
    t: &AttackTarget<'_>,
    rules: &RuleSet,
    budget: &SymexBudget,
    seed: u64,
) -> AttackReport {
    let start = Instant::now();
    let code = lower(&t.handler.merged);
    let e = symbolic_execute(&code, t.key());
    let (out, spent, exhausted) = simplify_with_rules(&e, rules, budget.steps);
    let mut r = AttackReport::new(AttackKind::Symex, t.mode, t.handler, seed);
    r.success = !exhausted && scores_as_simplified(&out, &t.ground_truth);
    r.budget_spent = spent;
    r.budget_exhausted = exhausted;
    if out.size() <= 512 {
        r.output = Some(out.to_string());
    }
    r.meta
        .insert("result_ops".into(), out.dag_op_count().to_string());
    r.meta.insert("rules".into(), rules.len().to_string());
    r.time_ms = start.elapsed().as_secs_f64() * 1e3;
    r
}
