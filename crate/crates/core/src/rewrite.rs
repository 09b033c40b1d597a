//! Recursive randomized MBA rewriting.
//!
//! Each iteration picks an operator node, maps its operands onto `x` and
//! `y`, and swaps the node for a random member of the class of `op(x, y)`
//! with the operands substituted back. Early iterations only pick from the
//! top two levels of the tree so growth spreads across the whole expression.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::expr::{
    check_equiv, normalize, Assignment, BinOp, EquivStrategy, EquivVerdict, Expr, Node, UnOp, Var,
};
use crate::rng::{self, Rng as StdRng};
use crate::synth::EquivClassDb;

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("class database has no usable classes")]
    EmptyDb,
    #[error("invalid bounds {0}..={1}")]
    InvalidBounds(usize, usize),
    #[error("rewrite changed semantics at {0:?}")]
    NotPreserved(Assignment),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewriteConfig {
    pub bound_min: usize,
    pub bound_max: usize,
    pub top_level_phase_fraction: f64,
    pub seed: u64,
    /// Re-draws when a pick is in no class.
    pub redraws: usize,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        RewriteConfig {
            bound_min: 20,
            bound_max: 30,
            top_level_phase_fraction: 0.25,
            seed: 0,
            redraws: 8,
        }
    }
}

impl RewriteConfig {
    pub fn with_bounds(bound_min: usize, bound_max: usize, seed: u64) -> Self {
        RewriteConfig {
            bound_min,
            bound_max,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Pattern {
    Bin(BinOp),
    Un(UnOp),
}

fn pattern_of(e: &Expr) -> Option<Pattern> {
    match e.node() {
        Node::Binary(op, ..) => Some(Pattern::Bin(*op)),
        Node::Unary(op, _) => Some(Pattern::Un(*op)),
        _ => None,
    }
}

/// Replacement tables for the single-operator patterns, built once per DB.
#[derive(Debug, Clone)]
pub struct Rewriter {
    table: HashMap<Pattern, Vec<Expr>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dir {
    Left,
    Right,
}

impl Rewriter {
    pub fn new(db: &EquivClassDb) -> Result<Rewriter, RewriteError> {
        let (x, y) = (Expr::x(), Expr::y());
        let mut table = HashMap::new();
        let pats = BinOp::ALL
            .iter()
            .map(|o| (Pattern::Bin(*o), Expr::binary(*o, x.clone(), y.clone())))
            .chain(
                UnOp::ALL
                    .iter()
                    .map(|o| (Pattern::Un(*o), Expr::unary(*o, x.clone()))),
            );
        for (p, pe) in pats {
            if matches!(p, Pattern::Bin(BinOp::Divides)) {
                continue;
            }
            if let Some(class) = db.lookup_class(&pe) {
                let npat = normalize(&pe);
                let members: Vec<Expr> = class
                    .verified_members()
                    .filter(|m| normalize(m) != npat)
                    .cloned()
                    .collect();
                if !members.is_empty() {
                    table.insert(p, members);
                }
            }
        }
        if table.is_empty() {
            return Err(RewriteError::EmptyDb);
        }
        Ok(Rewriter { table })
    }

    pub fn members_for(&self, e: &Expr) -> Option<&[Expr]> {
        self.table.get(&pattern_of(e)?).map(|v| v.as_slice())
    }

    /// Run the configured number of iterations and confirm equivalence on
    /// 1,000 random assignments plus edge cases.
    pub fn rewrite(&self, e: &Expr, cfg: &RewriteConfig) -> Result<Expr, RewriteError> {
        if cfg.bound_min > cfg.bound_max {
            return Err(RewriteError::InvalidBounds(cfg.bound_min, cfg.bound_max));
        }
        let mut rng = rng::rng(cfg.seed);
        let n = rng.gen_range(cfg.bound_min..=cfg.bound_max);
        let out =
            self.rewrite_iterations(e, n, cfg.top_level_phase_fraction, cfg.redraws, &mut rng);
        match check_equiv(
            e,
            &out,
            &EquivStrategy::RandomSampling {
                n: 1000,
                seed: rng.gen(),
            },
        ) {
            Ok(EquivVerdict::Inequivalent { counterexample }) => {
                Err(RewriteError::NotPreserved(counterexample))
            }
            _ => Ok(out),
        }
    }

    /// `n` iterations without the final equivalence check.
    pub fn rewrite_iterations(
        &self,
        e: &Expr,
        n: usize,
        top_fraction: f64,
        redraws: usize,
        rng: &mut StdRng,
    ) -> Expr {
        let top = (n as f64 * top_fraction).ceil() as usize;
        let mut cur = e.clone();
        for it in 0..n {
            for _ in 0..=redraws {
                let Some(path) = (if it < top {
                    pick_top(&cur, rng)
                } else {
                    pick_any(&cur, rng)
                }) else {
                    break;
                };
                let node = at_path(&cur, &path);
                let Some(members) = self.members_for(&node) else {
                    continue;
                };
                let m = &members[rng.gen_range(0..members.len())];
                cur = rewrite_at(&cur, &path, m);
                break;
            }
        }
        cur
    }
}

/// Instantiate a two-variable member at `node`: `x` and `y` become the
/// node's operands. Unary nodes bind both to the single operand.
pub fn instantiate(member: &Expr, node: &Expr) -> Expr {
    let (p, q) = match node.node() {
        Node::Binary(_, a, b) => (a.clone(), b.clone()),
        Node::Unary(_, a) => (a.clone(), a.clone()),
        _ => return node.clone(),
    };
    member.substitute(&|v| match v {
        Var::X => Some(p.clone()),
        Var::Y => Some(q.clone()),
        _ => None,
    })
}

pub fn at_path(e: &Expr, path: &[Dir]) -> Expr {
    let mut cur = e.clone();
    for d in path {
        let next = match (cur.node(), d) {
            (Node::Unary(_, a), _) | (Node::Binary(_, a, _), Dir::Left) => a.clone(),
            (Node::Binary(_, _, b), Dir::Right) => b.clone(),
            _ => panic!("path leaves the tree"),
        };
        cur = next;
    }
    cur
}

/// Replace the node at `path` by `member` instantiated on that node's
/// operands, copying the spine above it.
pub fn rewrite_at(e: &Expr, path: &[Dir], member: &Expr) -> Expr {
    if path.is_empty() {
        return instantiate(member, e);
    }
    let rest = &path[1..];
    match (e.node(), path[0]) {
        (Node::Unary(op, a), _) => Expr::unary(*op, rewrite_at(a, rest, member)),
        (Node::Binary(op, a, b), Dir::Left) => {
            Expr::binary(*op, rewrite_at(a, rest, member), b.clone())
        }
        (Node::Binary(op, a, b), Dir::Right) => {
            Expr::binary(*op, a.clone(), rewrite_at(b, rest, member))
        }
        _ => panic!("path leaves the tree"),
    }
}

/// Uniform over operator positions in the root and its children.
fn pick_top(e: &Expr, rng: &mut StdRng) -> Option<Vec<Dir>> {
    let mut cands = Vec::new();
    if !e.is_leaf() {
        cands.push(vec![]);
    }
    match e.node() {
        Node::Unary(_, a) if !a.is_leaf() => cands.push(vec![Dir::Left]),
        Node::Binary(_, a, b) => {
            if !a.is_leaf() {
                cands.push(vec![Dir::Left]);
            }
            if !b.is_leaf() {
                cands.push(vec![Dir::Right]);
            }
        }
        _ => {}
    }
    if cands.is_empty() {
        return None;
    }
    Some(cands.swap_remove(rng.gen_range(0..cands.len())))
}

/// Uniform over all operator positions of the tree (with multiplicity),
/// descending by subtree operator counts.
fn pick_any(e: &Expr, rng: &mut StdRng) -> Option<Vec<Dir>> {
    if e.is_leaf() {
        return None;
    }
    let mut path = Vec::new();
    let mut cur = e.clone();
    loop {
        let total = cur.op_count() as f64;
        let r = rng.gen::<f64>() * total;
        if r < 1.0 {
            return Some(path);
        }
        let next = match cur.node() {
            Node::Unary(_, a) => {
                path.push(Dir::Left);
                a.clone()
            }
            Node::Binary(_, a, b) => {
                let (wa, wb) = (a.op_count() as f64, b.op_count() as f64);
                if wa + wb <= 0.0 {
                    return Some(path);
                }
                if rng.gen::<f64>() * (wa + wb) < wa {
                    path.push(Dir::Left);
                    a.clone()
                } else {
                    path.push(Dir::Right);
                    b.clone()
                }
            }
            _ => unreachable!("leaves have no operator weight"),
        };
        cur = next;
    }
}

pub fn rewrite(e: &Expr, db: &EquivClassDb, cfg: &RewriteConfig) -> Result<Expr, RewriteError> {
    Rewriter::new(db)?.rewrite(e, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRow {
    pub bound: usize,
    /// Mean syntactic depth of the normalized outputs.
    pub mean_depth: f64,
    /// Mean number of distinct operator nodes (instruction estimate).
    pub mean_instructions: f64,
}

/// Per-bound growth statistics over `samples` runs with the bound fixed.
pub fn rewrite_depth_profile(
    e: &Expr,
    rw: &Rewriter,
    bounds: &[usize],
    samples: usize,
    seed: u64,
) -> Vec<DepthRow> {
    bounds
        .iter()
        .map(|&b| {
            let (mut d, mut ins) = (0.0, 0.0);
            for s in 0..samples {
                let mut r = rng::rng(rng::derive(seed, s as u64));
                let out = normalize(&rw.rewrite_iterations(e, b, 0.25, 8, &mut r));
                d += out.size() as f64;
                ins += out.dag_op_count() as f64;
            }
            DepthRow {
                bound: b,
                mean_depth: d / samples as f64,
                mean_instructions: ins / samples as f64,
            }
        })
        .collect()
}
