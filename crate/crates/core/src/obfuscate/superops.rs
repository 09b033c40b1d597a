//! Superoperators: inline SSA definitions into their uses so one handler
//! step covers a chain of instructions.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::rc::Rc;

use rand::Rng;

use super::ObfError;
use crate::expr::{check_equiv, normalize, EquivStrategy, Expr, Var};
use crate::ir::{Def, Operand, SsaProgram};
use crate::rng::Rng as StdRng;

/// What a handler slot computes, over `x`, `y` and `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoreSemantics {
    pub expr: Expr,
    /// Syntactic depth of the normalized expression.
    pub semantic_depth_hint: usize,
    normalized: Expr,
}

impl CoreSemantics {
    pub fn new(expr: Expr) -> CoreSemantics {
        let normalized = normalize(&expr);
        let semantic_depth_hint = normalized.size() as usize;
        CoreSemantics {
            expr,
            semantic_depth_hint,
            normalized,
        }
    }

    pub fn normalized(&self) -> &Expr {
        &self.normalized
    }

    /// Key used to match residual steps to handler slots.
    pub fn canonical(&self) -> String {
        self.normalized.to_string()
    }
}

/// One step of the residual program: `dest = sem(x, y, c)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperStep {
    pub dest: String,
    pub sem: CoreSemantics,
    pub x: Option<String>,
    pub y: Option<String>,
    pub c: Option<u64>,
    /// Indices of the SSA instructions folded into this step, ascending.
    pub span: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Residual {
    pub name: String,
    pub params: Vec<String>,
    pub steps: Vec<SuperStep>,
    pub ret: String,
}

impl Residual {
    pub fn semantics(&self) -> impl Iterator<Item = &CoreSemantics> {
        self.steps.iter().map(|s| &s.sem)
    }

    /// Direct interpretation, used as a reference for the VM.
    pub fn eval(&self, args: &[u64]) -> u64 {
        let mut env: HashMap<&str, u64> = self
            .params
            .iter()
            .map(|p| p.as_str())
            .zip(args.iter().copied())
            .collect();
        for s in &self.steps {
            let get = |o: &Option<String>| o.as_ref().map_or(0, |v| env[v.as_str()]);
            let a = crate::expr::Assignment {
                x: get(&s.x),
                y: get(&s.y),
                c: s.c.unwrap_or(0),
                k: 0,
            };
            let v = s.sem.expr.eval(&a);
            env.insert(&s.dest, v);
        }
        env[self.ret.as_str()]
    }
}

#[derive(Debug)]
enum Sym {
    Leaf(Operand),
    Un(crate::expr::UnOp, Rc<Sym>),
    Bin(crate::expr::BinOp, Rc<Sym>, Rc<Sym>),
}

/// Distinct leaves in left-to-right order of first occurrence. Trees
/// share subtrees, so visited nodes are skipped.
fn leaves<'a>(s: &'a Sym, out: &mut Vec<&'a Operand>) {
    fn go<'a>(s: &'a Sym, seen: &mut HashSet<*const Sym>, out: &mut Vec<&'a Operand>) {
        if !seen.insert(s as *const Sym) {
            return;
        }
        match s {
            Sym::Leaf(o) => out.push(o),
            Sym::Un(_, a) => go(a, seen, out),
            Sym::Bin(_, a, b) => {
                go(a, seen, out);
                go(b, seen, out);
            }
        }
    }
    go(s, &mut HashSet::new(), out)
}

struct Support {
    vars: Vec<String>,
    consts: Vec<u64>,
}

fn support(s: &Sym) -> Support {
    let mut ls = Vec::new();
    leaves(s, &mut ls);
    let mut sup = Support {
        vars: Vec::new(),
        consts: Vec::new(),
    };
    for l in ls {
        match l {
            Operand::Var(v) if !sup.vars.contains(v) => sup.vars.push(v.clone()),
            Operand::Const(c) if !sup.consts.contains(c) => sup.consts.push(*c),
            _ => {}
        }
    }
    sup
}

fn fits(s: &Support) -> bool {
    s.vars.len() <= 2
}

fn to_expr(s: &Sym, sup: &Support) -> Expr {
    fn go(s: &Sym, sup: &Support, memo: &mut HashMap<*const Sym, Expr>) -> Expr {
        if let Some(e) = memo.get(&(s as *const Sym)) {
            return e.clone();
        }
        let e = match s {
            Sym::Leaf(Operand::Var(v)) => {
                Expr::var(if sup.vars[0] == *v { Var::X } else { Var::Y })
            }
            Sym::Leaf(Operand::Const(v)) if sup.consts[0] == *v => Expr::c(),
            Sym::Leaf(Operand::Const(v)) => Expr::constant(*v),
            Sym::Un(op, a) => Expr::unary(*op, go(a, sup, memo)),
            Sym::Bin(op, a, b) => Expr::binary(*op, go(a, sup, memo), go(b, sup, memo)),
        };
        memo.insert(s as *const Sym, e.clone());
        e
    }
    go(s, sup, &mut HashMap::new())
}

/// Forward symbolic evaluation of the instructions in `span`, with the
/// step's free variables bound to `x`/`y` and its constant to `c`.
fn eval_span(p: &SsaProgram, step: &SuperStep) -> Expr {
    let mut env: HashMap<&str, Expr> = HashMap::new();
    if let Some(v) = &step.x {
        env.insert(v, Expr::x());
    }
    if let Some(v) = &step.y {
        env.insert(v, Expr::y());
    }
    let arg = |o: &Operand, env: &HashMap<&str, Expr>| match o {
        Operand::Var(v) => env[v.as_str()].clone(),
        Operand::Const(c) if Some(*c) == step.c => Expr::c(),
        Operand::Const(c) => Expr::constant(*c),
    };
    for &i in &step.span {
        let ins = &p.body[i];
        let a = arg(&ins.lhs, &env);
        let v = match (ins.op.binop(), ins.op.unop()) {
            (Some(op), _) => Expr::binary(op, a, arg(ins.rhs.as_ref().unwrap(), &env)),
            (_, Some(op)) => Expr::unary(op, a),
            _ => unreachable!(),
        };
        env.insert(&ins.dest, v);
    }
    env[step.dest.as_str()].clone()
}

/// Tree size, counting shared subtrees once per use.
fn sym_size(s: &Sym) -> usize {
    fn go(s: &Sym, memo: &mut HashMap<*const Sym, usize>) -> usize {
        if let Some(&n) = memo.get(&(s as *const Sym)) {
            return n;
        }
        let n = match s {
            Sym::Leaf(_) => 1,
            Sym::Un(_, a) => 1usize.saturating_add(go(a, memo)),
            Sym::Bin(_, a, b) => 1usize
                .saturating_add(go(a, memo))
                .saturating_add(go(b, memo)),
        };
        memo.insert(s as *const Sym, n);
        n
    }
    go(s, &mut HashMap::new())
}

/// Expression for instruction `root` with every variable in `inl` replaced
/// by its definition, recursively. Each inlined definition is built once
/// and shared.
fn build(p: &SsaProgram, root: usize, inl: &HashSet<String>) -> Rc<Sym> {
    fn instr(
        p: &SsaProgram,
        i: usize,
        inl: &HashSet<String>,
        memo: &mut HashMap<usize, Rc<Sym>>,
    ) -> Rc<Sym> {
        if let Some(s) = memo.get(&i) {
            return s.clone();
        }
        let ins = &p.body[i];
        let arg = |o: &Operand, memo: &mut HashMap<usize, Rc<Sym>>| match o {
            Operand::Var(v) if inl.contains(v) => match p.def_of(v) {
                Some(Def::Instr(j)) => instr(p, j, inl, memo),
                _ => Rc::new(Sym::Leaf(o.clone())),
            },
            _ => Rc::new(Sym::Leaf(o.clone())),
        };
        let s = match (ins.op.binop(), ins.op.unop()) {
            (Some(op), _) => {
                let a = arg(&ins.lhs, memo);
                let b = arg(ins.rhs.as_ref().expect("binary instruction"), memo);
                Rc::new(Sym::Bin(op, a, b))
            }
            (_, Some(op)) => Rc::new(Sym::Un(op, arg(&ins.lhs, memo))),
            _ => unreachable!("SSA has no mov"),
        };
        memo.insert(i, s.clone());
        s
    }
    instr(p, root, inl, &mut HashMap::new())
}

/// Variable ids and operand use-def links, computed once per program.
struct Index<'p> {
    names: Vec<&'p str>,
    id: HashMap<&'p str, usize>,
    /// Per instruction: (variable id, defining instruction) of each operand.
    ops: Vec<Vec<(Option<usize>, Option<usize>)>>,
}

impl<'p> Index<'p> {
    fn new(p: &'p SsaProgram) -> Self {
        let mut names: Vec<&str> = p.params.iter().map(|s| s.as_str()).collect();
        names.extend(p.body.iter().map(|i| i.dest.as_str()));
        names.sort_unstable();
        names.dedup();
        let id: HashMap<&str, usize> = names.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let ops = p
            .body
            .iter()
            .map(|ins| {
                ins.operands()
                    .map(|o| {
                        let v = o.as_var();
                        let def = v.and_then(|v| match p.def_of(v) {
                            Some(Def::Instr(j)) => Some(j),
                            _ => None,
                        });
                        (v.map(|v| id[v]), def)
                    })
                    .collect()
            })
            .collect();
        Index { names, id, ops }
    }
}

/// Distinct free variables (as a bitset over variable ids) and tree size of
/// `build(p, i, inl)`, without building it.
struct Shape<'a, 'p> {
    ix: &'a Index<'p>,
    inl: &'a [bool],
    /// Treated as not inlined.
    skip: Option<usize>,
    vars: HashMap<usize, Rc<Vec<u64>>>,
    size: HashMap<usize, usize>,
}

impl<'a, 'p> Shape<'a, 'p> {
    fn new(ix: &'a Index<'p>, inl: &'a [bool], skip: Option<usize>) -> Self {
        Shape {
            ix,
            inl,
            skip,
            vars: HashMap::new(),
            size: HashMap::new(),
        }
    }

    fn inlined(&self, op: (Option<usize>, Option<usize>)) -> Option<usize> {
        match op {
            (Some(v), Some(j)) if self.inl[v] && self.skip != Some(v) => Some(j),
            _ => None,
        }
    }

    fn vars(&mut self, i: usize) -> Rc<Vec<u64>> {
        if let Some(s) = self.vars.get(&i) {
            return s.clone();
        }
        let mut out = vec![0u64; self.ix.names.len().div_ceil(64)];
        for k in 0..self.ix.ops[i].len() {
            let op = self.ix.ops[i][k];
            match (self.inlined(op), op.0) {
                (Some(j), _) => {
                    let sub = self.vars(j);
                    out.iter_mut().zip(sub.iter()).for_each(|(a, b)| *a |= b);
                }
                (None, Some(v)) => out[v / 64] |= 1 << (v % 64),
                (None, None) => {}
            }
        }
        let out = Rc::new(out);
        self.vars.insert(i, out.clone());
        out
    }

    fn size(&mut self, i: usize) -> usize {
        if let Some(&n) = self.size.get(&i) {
            return n;
        }
        let mut n = 1usize;
        for k in 0..self.ix.ops[i].len() {
            n = n.saturating_add(match self.inlined(self.ix.ops[i][k]) {
                Some(j) => self.size(j),
                None => 1,
            });
        }
        self.size.insert(i, n);
        n
    }
}

impl Index<'_> {
    fn mask(&self, inl: &HashSet<String>) -> Vec<bool> {
        let mut m = vec![false; self.names.len()];
        for v in inl {
            if let Some(&i) = self.id.get(v.as_str()) {
                m[i] = true;
            }
        }
        m
    }
}

fn popcount(s: &[u64]) -> usize {
    s.iter().map(|w| w.count_ones() as usize).sum()
}

fn members<'p>(s: &[u64], ix: &Index<'p>) -> Vec<&'p str> {
    (0..ix.names.len())
        .filter(|&v| s[v / 64] >> (v % 64) & 1 == 1)
        .map(|v| ix.names[v])
        .collect()
}

/// Instructions pulled in by `build(p, root, inl)`.
fn reached(p: &SsaProgram, root: usize, inl: &HashSet<String>, out: &mut Vec<usize>) {
    for v in p.body[root].operands().filter_map(|o| o.as_var()) {
        if let (true, Some(Def::Instr(i))) = (inl.contains(v), p.def_of(v)) {
            if !out.contains(&i) {
                out.push(i);
                reached(p, i, inl, out);
            }
        }
    }
}

fn make_step(dest: String, tree: &Sym) -> SuperStep {
    let sup = support(tree);
    SuperStep {
        dest,
        sem: CoreSemantics::new(to_expr(tree, &sup)),
        x: sup.vars.first().cloned(),
        y: sup.vars.get(1).cloned(),
        c: sup.consts.first().copied(),
        span: vec![],
    }
}

/// Roots smaller than this are folded into their consumers when possible.
const ABSORB_BELOW: usize = 7;

/// Grow superoperators backward from the program result. Each root gets a
/// recursion bound drawn from `bounds`: definitions up to that many levels
/// below the root may be inlined, one randomly chosen variable at a time,
/// preferring choices that keep at most two free variables. The step keeps
/// the larger of the last fitting state and a greedy un-inlining of the
/// final state. Whatever is still free becomes a root of its own. Small
/// roots are then folded into all their consumers when they still fit.
pub fn build_superoperators(
    p: &SsaProgram,
    bounds: (usize, usize),
    rng: &mut StdRng,
) -> Result<Residual, ObfError> {
    if bounds.0 > bounds.1 {
        return Err(ObfError::InvalidConfig(format!(
            "superoperator bounds {}..={}",
            bounds.0, bounds.1
        )));
    }
    let instr_of = |v: &str| match p.def_of(v) {
        Some(Def::Instr(i)) => Some(i),
        _ => None,
    };
    let mut steps: Vec<(usize, SuperStep)> = Vec::new();
    let ret = match &p.ret {
        Operand::Var(v) => v.clone(),
        Operand::Const(c) => {
            let mut name = "ret".to_string();
            while p.def_of(&name).is_some() {
                name.push('_');
            }
            let sem = CoreSemantics::new(Expr::c());
            steps.push((
                usize::MAX,
                SuperStep {
                    dest: name.clone(),
                    sem,
                    x: None,
                    y: None,
                    c: Some(*c),
                    span: vec![],
                },
            ));
            name
        }
    };
    let ix = Index::new(p);
    let mut done: BTreeSet<usize> = BTreeSet::new();
    let mut plans: BTreeMap<usize, HashSet<String>> = BTreeMap::new();
    let mut work: Vec<usize> = instr_of(&ret).into_iter().collect();
    while let Some(root) = work.pop() {
        if !done.insert(root) {
            continue;
        }
        let bound = rng.gen_range(bounds.0..=bounds.1);
        let mut inl: HashSet<String> = HashSet::new();
        let mut level: HashMap<String, usize> = HashMap::new();
        for v in p.body[root].operands().filter_map(|o| o.as_var()) {
            level.insert(v.to_string(), 1);
        }
        let mut best = inl.clone();
        loop {
            let mask = ix.mask(&inl);
            let mut shape = Shape::new(&ix, &mask, None);
            let free = shape.vars(root);
            let uses: Vec<&str> = members(&free, &ix)
                .into_iter()
                .filter(|v| instr_of(v).is_some() && level[*v] <= bound)
                .collect();
            if uses.is_empty() {
                break;
            }
            // Inlining `v` replaces every occurrence of it by its definition.
            let counts: Vec<usize> = uses
                .iter()
                .map(|&v| {
                    let def = shape.vars(instr_of(v).unwrap());
                    let id = ix.id[v];
                    let mut merged: Vec<u64> =
                        free.iter().zip(def.iter()).map(|(a, b)| a | b).collect();
                    if def[id / 64] >> (id % 64) & 1 == 0 {
                        merged[id / 64] &= !(1 << (id % 64));
                    }
                    popcount(&merged)
                })
                .collect();
            let least = counts.iter().map(|&n| n.max(2)).min().unwrap();
            let pool: Vec<usize> = (0..uses.len())
                .filter(|&i| counts[i].max(2) == least)
                .collect();
            let i = pool[rng.gen_range(0..pool.len())];
            let v = uses[i].to_string();
            let l = level[&v] + 1;
            for u in p.body[instr_of(&v).unwrap()]
                .operands()
                .filter_map(|o| o.as_var())
            {
                let e = level.entry(u.to_string()).or_insert(l);
                *e = (*e).min(l);
            }
            inl.insert(v);
            if counts[i] <= 2 {
                best = inl.clone();
            }
        }
        // Un-inline greedily from the final state until it fits again; keep
        // whichever fitting state is larger. Only definitions still reached
        // from the root matter.
        let mut cut = inl;
        loop {
            let mask = ix.mask(&cut);
            if popcount(&Shape::new(&ix, &mask, None).vars(root)) <= 2 {
                break;
            }
            let mut span = Vec::new();
            reached(p, root, &cut, &mut span);
            let mut vs: Vec<&String> = span.iter().map(|&i| &p.body[i].dest).collect();
            vs.sort();
            let (_, v) = vs
                .iter()
                .map(|&v| {
                    let mut sh = Shape::new(&ix, &mask, Some(ix.id[v.as_str()]));
                    (
                        (popcount(&sh.vars(root)), usize::MAX - sh.size(root)),
                        v.clone(),
                    )
                })
                .min()
                .unwrap();
            cut.remove(&v);
        }
        let a = build(p, root, &best);
        let b = build(p, root, &cut);
        let chosen = if sym_size(&b) > sym_size(&a) {
            cut
        } else {
            best
        };
        for v in &support(&build(p, root, &chosen)).vars {
            if let Some(i) = instr_of(v) {
                work.push(i);
            }
        }
        plans.insert(root, chosen);
    }
    // A tiny root costs a dispatch of its own; fold it into every consumer
    // when they all still fit.
    let ret_root = instr_of(&ret);
    if bounds.1 > 0 {
        loop {
            let mut changed = false;
            let roots: Vec<usize> = plans.keys().copied().collect();
            for r in roots {
                if Some(r) == ret_root || sym_size(&build(p, r, &plans[&r])) >= ABSORB_BELOW {
                    continue;
                }
                let dest = &p.body[r].dest;
                let users: Vec<usize> = plans
                    .keys()
                    .copied()
                    .filter(|&s| s != r && support(&build(p, s, &plans[&s])).vars.contains(dest))
                    .collect();
                let mut grown = Vec::new();
                for &s in &users {
                    let mut set = plans[&s].clone();
                    set.extend(plans[&r].iter().cloned());
                    set.insert(dest.clone());
                    if !fits(&support(&build(p, s, &set))) {
                        break;
                    }
                    grown.push((s, set));
                }
                if grown.len() == users.len() && !users.is_empty() {
                    for (s, set) in grown {
                        plans.insert(s, set);
                    }
                    plans.remove(&r);
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }
    for (&root, chosen) in &plans {
        let tree = build(p, root, chosen);
        let mut span = vec![root];
        reached(p, root, chosen, &mut span);
        span.sort_unstable();
        span.dedup();
        let mut step = make_step(p.body[root].dest.clone(), &tree);
        step.span = span;
        let reference = eval_span(p, &step);
        let verdict = check_equiv(
            &step.sem.expr,
            &reference,
            &EquivStrategy::RandomSampling {
                n: 200,
                seed: root as u64,
            },
        );
        if !matches!(verdict, Ok(v) if v.is_equivalent()) {
            return Err(ObfError::SuperoperatorMismatch(step.dest));
        }
        steps.push((root, step));
    }
    steps.sort_by_key(|(i, _)| *i);
    Ok(Residual {
        name: p.name.clone(),
        params: p.params.clone(),
        steps: steps.into_iter().map(|(_, s)| s).collect(),
        ret,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{eval_tac, parse_tac, to_ssa};
    use crate::rng::rng;

    const CHAIN: &str = "func f(a, b) {\n d = a + b\n b = a * d\n d = b | d\n return d\n}";

    #[test]
    fn chain_fully_inlines() {
        let p = to_ssa(&parse_tac(CHAIN).unwrap());
        let r = build_superoperators(&p, (12, 12), &mut rng(1)).unwrap();
        assert_eq!(r.steps.len(), 1);
        let s = &r.steps[0];
        assert_eq!(s.sem.expr.to_string(), "(or (mul x (add x y)) (add x y))");
        assert_eq!(s.sem.expr.syntactic_depth(), 9);
        assert_eq!((s.x.as_deref(), s.y.as_deref()), (Some("a"), Some("b")));
        assert_eq!(r.eval(&[2, 1]), 7);
    }

    #[test]
    fn zero_bounds_keep_instructions() {
        let p = to_ssa(&parse_tac(CHAIN).unwrap());
        let r = build_superoperators(&p, (0, 0), &mut rng(1)).unwrap();
        assert_eq!(r.steps.len(), 3);
        assert!(r.steps.iter().all(|s| s.sem.expr.syntactic_depth() == 3));
        assert_eq!(r.eval(&[2, 1]), 7);
    }

    #[test]
    fn constant_result_and_param_result() {
        let p = to_ssa(&parse_tac("func f(a) {\n t = 3 + 4\n return t\n}").unwrap());
        let r = build_superoperators(&p, (3, 12), &mut rng(1)).unwrap();
        assert_eq!(r.steps.len(), 1);
        assert_eq!(r.eval(&[5]), 7);
        let p = to_ssa(&parse_tac("func f(a) {\n t = a\n return t\n}").unwrap());
        let r = build_superoperators(&p, (3, 12), &mut rng(1)).unwrap();
        assert!(r.steps.is_empty());
        assert_eq!(r.eval(&[5]), 5);
    }

    #[test]
    fn support_limits_respected() {
        let src = "func f(a, b, c) {\n t1 = a + 5\n t2 = t1 ^ b\n t3 = t2 * c\n t4 = t3 - 9\n t5 = t4 | t1\n return t5\n}";
        let tac = parse_tac(src).unwrap();
        let p = to_ssa(&tac);
        for seed in 0..50 {
            let r = build_superoperators(&p, (3, 12), &mut rng(seed)).unwrap();
            for s in &r.steps {
                assert!(s.sem.expr.vars().iter().all(|v| v != Var::K));
            }
            for args in [[1u64, 2, 3], [u64::MAX, 7, 1 << 40]] {
                assert_eq!(r.eval(&args), eval_tac(&tac, &args).unwrap());
            }
        }
    }
}
