//! Enumerative synthesis of semantic equivalence classes over the
//! two-variable grammar `S -> x | y | (S op S) | (unop S)`.
//!
//! Expressions are derived leftmost-first from a worklist of sentential
//! forms, one rule application per round. Whenever a derivation completes a
//! subtree that normalization would rewrite into a different constant-free
//! expression, the form is dropped: the normalized variant is derived
//! elsewhere. Survivors are bucketed by their outputs on a fixed vector set
//! and verified against the bucket representative.

mod db;

pub use db::{load_db, store_db, ClassRecord, DbError, DbMeta, EquivClassDb, Member};

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{normalize, BinOp, Columns, CompiledExpr, Expr, UnOp, EDGE_CASES};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("enumeration exceeded the budget of {0} expressions")]
    BudgetExceeded(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthGrammar {
    pub binops: Vec<BinOp>,
    pub unops: Vec<UnOp>,
}

impl Default for SynthGrammar {
    fn default() -> Self {
        SynthGrammar {
            binops: vec![
                BinOp::Add,
                BinOp::Sub,
                BinOp::Mul,
                BinOp::And,
                BinOp::Or,
                BinOp::Xor,
            ],
            unops: vec![UnOp::Not, UnOp::Neg],
        }
    }
}

impl SynthGrammar {
    pub fn description(&self) -> String {
        let b: Vec<&str> = self.binops.iter().map(|o| o.mnemonic()).collect();
        let u: Vec<&str> = self.unops.iter().map(|o| o.mnemonic()).collect();
        format!(
            "S -> x | y | (S op S) op={} | (unop S) unop={}",
            b.join(","),
            u.join(",")
        )
    }

    /// Truncated SHA-256 of the grammar description, stored in DB headers.
    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.description().as_bytes())[..16])
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub max_depth: usize,
    pub eval_vectors: usize,
    pub seed: u64,
    pub grammar: SynthGrammar,
    /// Cap on derived terminal expressions.
    pub max_expressions: usize,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl SynthConfig {
    pub fn new(max_depth: usize, eval_vectors: usize, seed: u64) -> Self {
        SynthConfig {
            max_depth,
            eval_vectors,
            seed,
            grammar: SynthGrammar::default(),
            max_expressions: 5_000_000,
            workers: None,
        }
    }
}

/// The fixed evaluation vectors: six edge pairs, then pseudorandom pairs.
pub fn eval_vectors(count: usize, seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut rng = crate::rng::rng(seed);
    let mut xs = Vec::with_capacity(count);
    let mut ys = Vec::with_capacity(count);
    for i in 0..6.min(count) {
        xs.push(EDGE_CASES[i]);
        ys.push(EDGE_CASES[(i + 3) % 6]);
    }
    while xs.len() < count {
        xs.push(rng.gen());
        ys.push(rng.gen());
    }
    (xs, ys)
}

/// 128-bit digest of an expression's outputs on the vector set.
pub fn signature(e: &Expr, xs: &[u64], ys: &[u64]) -> u128 {
    let mut out = vec![0u64; xs.len()];
    CompiledExpr::new(e).eval_batch(
        &Columns {
            x: xs,
            y: ys,
            c: &[],
            k: &[],
        },
        &mut out,
    );
    let mut h = Sha256::new();
    for v in &out {
        h.update(v.to_le_bytes());
    }
    u128::from_le_bytes(h.finalize()[..16].try_into().unwrap())
}

#[derive(Clone, Copy)]
enum Sym {
    Leaf(Expr2),
    Un(UnOp),
    Bin(BinOp),
}

#[derive(Clone, Copy)]
enum Expr2 {
    X,
    Y,
}

/// A sentential form: the stack of partially derived operator nodes along
/// the path to the leftmost hole.
#[derive(Clone, Default)]
struct Form {
    frames: Vec<(Sym, Vec<Expr>)>,
    holes: usize,
}

fn arity(s: Sym) -> usize {
    match s {
        Sym::Leaf(_) => 0,
        Sym::Un(_) => 1,
        Sym::Bin(_) => 2,
    }
}

fn build(s: Sym, kids: Vec<Expr>) -> Expr {
    match s {
        Sym::Leaf(Expr2::X) => Expr::x(),
        Sym::Leaf(Expr2::Y) => Expr::y(),
        Sym::Un(op) => Expr::unary(op, kids[0].clone()),
        Sym::Bin(op) => Expr::binary(op, kids[0].clone(), kids[1].clone()),
    }
}

/// Normalization would turn `e` into a different constant-free expression.
pub fn trivially_reducible(e: &Expr) -> bool {
    if e.is_leaf() {
        return false;
    }
    let n = normalize(e);
    n != *e && !n.has_const()
}

enum Step {
    Open(Form),
    Done(Expr),
    Pruned,
}

/// Apply one production to the leftmost hole.
fn derive(form: &Form, sym: Sym, prune: bool) -> Step {
    let mut f = form.clone();
    f.holes -= 1;
    if arity(sym) > 0 {
        f.holes += arity(sym);
        f.frames.push((sym, Vec::new()));
        return Step::Open(f);
    }
    let mut done = build(sym, vec![]);
    loop {
        let Some((s, kids)) = f.frames.last_mut() else {
            return Step::Done(done);
        };
        kids.push(done);
        if kids.len() < arity(*s) {
            return Step::Open(f);
        }
        let (s, kids) = f.frames.pop().unwrap();
        done = build(s, kids);
        if prune && trivially_reducible(&done) {
            return Step::Pruned;
        }
    }
}

/// Terminal expressions of each depth `1..=max_depth`, in derivation order.
/// Worklist forms whose open holes exceed the remaining rule budget are
/// dropped since they cannot complete in time.
pub fn enumerate(
    grammar: &SynthGrammar,
    max_depth: usize,
    prune: bool,
    cap: usize,
) -> Result<Vec<Expr>, SynthError> {
    let mut syms = vec![Sym::Leaf(Expr2::X), Sym::Leaf(Expr2::Y)];
    syms.extend(grammar.binops.iter().map(|o| Sym::Bin(*o)));
    syms.extend(grammar.unops.iter().map(|o| Sym::Un(*o)));
    let mut worklist = vec![Form {
        frames: vec![],
        holes: 1,
    }];
    let mut out = Vec::new();
    for d in 1..=max_depth {
        let remaining = max_depth - d;
        let mut next = Vec::new();
        for form in &worklist {
            for &s in &syms {
                match derive(form, s, prune) {
                    Step::Open(f) if f.holes <= remaining => next.push(f),
                    Step::Open(_) | Step::Pruned => {}
                    Step::Done(e) => {
                        out.push(e);
                        if out.len() > cap {
                            return Err(SynthError::BudgetExceeded(cap));
                        }
                    }
                }
            }
        }
        worklist = next;
    }
    Ok(out)
}

/// Low bytes of `e` on all 2^16 pairs of 8-bit inputs.
fn truth_table_8(e: &Expr, xs: &[u64], ys: &[u64]) -> Vec<u8> {
    let mut out = vec![0u64; xs.len()];
    CompiledExpr::new(e).eval_batch(
        &Columns {
            x: xs,
            y: ys,
            c: &[],
            k: &[],
        },
        &mut out,
    );
    out.into_iter().map(|v| v as u8).collect()
}

fn narrow_inputs() -> (Vec<u64>, Vec<u64>) {
    (0..1u64 << 16).map(|i| (i & 0xff, i >> 8)).unzip()
}

/// Split one signature bucket into verified classes. Members are sorted by
/// (depth, canonical text); each failing member seeds or joins a sub-class.
fn verify_bucket(
    sig: u128,
    mut members: Vec<(Expr, String)>,
    nx: &[u64],
    ny: &[u64],
) -> Vec<ClassRecord> {
    members.sort_by(|a, b| a.0.size().cmp(&b.0.size()).then_with(|| a.1.cmp(&b.1)));
    let mut classes: Vec<(Vec<u8>, ClassRecord)> = Vec::new();
    for (e, _) in members {
        let tt = truth_table_8(&e, nx, ny);
        match classes.iter_mut().find(|(t, _)| *t == tt) {
            Some((_, rec)) => rec.members.push(Member {
                expr: e,
                verified: true,
            }),
            None => classes.push((
                tt,
                ClassRecord {
                    signature: sig,
                    representative: e.clone(),
                    members: vec![Member {
                        expr: e,
                        verified: true,
                    }],
                },
            )),
        }
    }
    classes.into_iter().map(|(_, r)| r).collect()
}

pub fn synthesize_classes(cfg: &SynthConfig) -> Result<EquivClassDb, SynthError> {
    if cfg.max_depth < 1 {
        return Err(SynthError::InvalidConfig(
            "max_depth must be at least 1".into(),
        ));
    }
    if cfg.eval_vectors < 100 {
        return Err(SynthError::InvalidConfig(
            "at least 100 evaluation vectors are required".into(),
        ));
    }
    match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(|| build_db(cfg)),
        None => build_db(cfg),
    }
}

fn build_db(cfg: &SynthConfig) -> Result<EquivClassDb, SynthError> {
    let exprs = enumerate(&cfg.grammar, cfg.max_depth, true, cfg.max_expressions)?;
    let (xs, ys) = eval_vectors(cfg.eval_vectors, cfg.seed);
    let keyed: Vec<(u128, Expr, String)> = exprs
        .par_iter()
        .map(|e| (signature(e, &xs, &ys), e.clone(), e.to_string()))
        .collect();
    let mut buckets: BTreeMap<u128, Vec<(Expr, String)>> = BTreeMap::new();
    for (s, e, t) in keyed {
        buckets.entry(s).or_default().push((e, t));
    }
    let (nx, ny) = narrow_inputs();
    let buckets: Vec<(u128, Vec<(Expr, String)>)> = buckets.into_iter().collect();
    let mut classes: Vec<ClassRecord> = buckets
        .into_par_iter()
        .flat_map_iter(|(s, m)| verify_bucket(s, m, &nx, &ny))
        .collect();
    classes.sort_by_cached_key(|c| (c.representative.size(), c.representative.to_string()));
    let meta = DbMeta {
        grammar_hash: cfg.grammar.hash(),
        grammar: cfg.grammar.clone(),
        max_depth: cfg.max_depth,
        seed: cfg.seed,
        vectors: cfg.eval_vectors,
    };
    Ok(EquivClassDb::new(meta, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    /// Unpruned trees of exactly `size` nodes, built bottom-up.
    fn all_trees(g: &SynthGrammar, max: usize) -> Vec<Expr> {
        let mut by_size: Vec<Vec<Expr>> = vec![vec![], vec![Expr::x(), Expr::y()]];
        for s in 2..=max {
            let mut v = Vec::new();
            for &u in &g.unops {
                for a in &by_size[s - 1] {
                    v.push(Expr::unary(u, a.clone()));
                }
            }
            for &b in &g.binops {
                for l in 1..s - 1 {
                    for a in &by_size[l] {
                        for c in &by_size[s - 1 - l] {
                            v.push(Expr::binary(b, a.clone(), c.clone()));
                        }
                    }
                }
            }
            by_size.push(v);
        }
        by_size.concat()
    }

    #[test]
    fn unpruned_worklist_matches_tree_count() {
        let g = SynthGrammar::default();
        let w = enumerate(&g, 5, false, usize::MAX).unwrap();
        assert_eq!(w.len(), 1382);
        let a: HashSet<Expr> = w.into_iter().collect();
        let b: HashSet<Expr> = all_trees(&g, 5).into_iter().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pruning_keeps_every_behavior() {
        let g = SynthGrammar::default();
        let (xs, ys) = eval_vectors(1000, 3);
        let full: HashSet<u128> = all_trees(&g, 5)
            .iter()
            .map(|e| signature(e, &xs, &ys))
            .collect();
        let pruned = enumerate(&g, 5, true, usize::MAX).unwrap();
        assert!(pruned.len() < 1382);
        let kept: HashSet<u128> = pruned.iter().map(|e| signature(e, &xs, &ys)).collect();
        assert_eq!(full, kept);
    }

    #[test]
    fn budget_is_enforced() {
        let g = SynthGrammar::default();
        assert!(matches!(
            enumerate(&g, 5, true, 10),
            Err(SynthError::BudgetExceeded(10))
        ));
    }

    #[test]
    fn plus_minus_depth_three() {
        let mut cfg = SynthConfig::new(3, 100, 1);
        cfg.grammar = SynthGrammar {
            binops: vec![BinOp::Add, BinOp::Sub],
            unops: vec![],
        };
        let db = synthesize_classes(&cfg).unwrap();
        let reps: Vec<String> = db
            .classes()
            .iter()
            .map(|c| c.representative.to_string())
            .collect();
        assert!(reps.contains(&"x".to_string()) && reps.contains(&"y".to_string()));
        let add = db.lookup_class(&(Expr::x() + Expr::y())).unwrap();
        let sub = db.lookup_class(&(Expr::x() - Expr::y())).unwrap();
        assert_ne!(add.signature, sub.signature);
        assert_eq!(db.lookup_class(&Expr::x()).unwrap().members.len(), 1);
    }

    #[test]
    fn depth_five_class_count_matches_brute_force() {
        let g = SynthGrammar::default();
        let (nx, ny) = narrow_inputs();
        let tables: HashSet<Vec<u8>> = all_trees(&g, 5)
            .iter()
            .map(|e| truth_table_8(e, &nx, &ny))
            .collect();
        let db = synthesize_classes(&SynthConfig::new(5, 1000, 11)).unwrap();
        assert_eq!(db.classes().len(), tables.len());
    }
}
