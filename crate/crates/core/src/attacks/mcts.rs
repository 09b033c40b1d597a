//! Oracle-guided program synthesis: Monte Carlo tree search over leftmost
//! derivations of a three-variable expression grammar.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use super::{confirms, AttackError, AttackKind, AttackReport, AttackTarget, Mode};
use crate::expr::{BinOp, Expr, UnOp, Var, EDGE_CASES};
use crate::rng::{rng, Rng as StdRng};

/// The four-field configuration vector: exploration constant, iteration
/// budget, candidate depth cap, and a field without a known meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBudget {
    pub uct_constant: f64,
    pub iterations: usize,
    /// Maximum syntactic depth (node count) of a candidate.
    pub max_depth: usize,
    pub unused: u32,
    /// I/O samples driving the reward.
    pub samples: usize,
    /// Extra oracle probes a candidate must pass before it is accepted.
    pub probes: usize,
    pub wall_clock: Duration,
}

impl Default for SynthBudget {
    fn default() -> Self {
        SynthBudget {
            uct_constant: 1.5,
            iterations: 50_000,
            max_depth: 20,
            unused: 0,
            samples: 20,
            probes: 1000,
            wall_clock: Duration::from_secs(60),
        }
    }
}

impl SynthBudget {
    pub fn with_iterations(iterations: usize) -> Self {
        SynthBudget {
            iterations,
            ..Default::default()
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "({}, {}, {}, {}) = (uct, iterations, max_depth, unused)",
            self.uct_constant, self.iterations, self.max_depth, self.unused
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prod {
    Bin(BinOp),
    Un(UnOp),
    Leaf(Var),
}

const PRODS: [Prod; 13] = [
    Prod::Bin(BinOp::Add),
    Prod::Bin(BinOp::Sub),
    Prod::Bin(BinOp::Mul),
    Prod::Bin(BinOp::And),
    Prod::Bin(BinOp::Or),
    Prod::Bin(BinOp::Xor),
    Prod::Bin(BinOp::Shl),
    Prod::Bin(BinOp::Shr),
    Prod::Un(UnOp::Not),
    Prod::Un(UnOp::Neg),
    Prod::Leaf(Var::X),
    Prod::Leaf(Var::Y),
    Prod::Leaf(Var::C),
];

const LEAVES: [Prod; 3] = [Prod::Leaf(Var::X), Prod::Leaf(Var::Y), Prod::Leaf(Var::C)];

fn arity(p: Prod) -> usize {
    match p {
        Prod::Bin(_) => 2,
        Prod::Un(_) => 1,
        Prod::Leaf(_) => 0,
    }
}

/// Open holes after the prefix `seq`.
fn holes(seq: &[Prod]) -> usize {
    seq.iter().fold(1usize, |h, &p| h - 1 + arity(p))
}

fn allowed(len: usize, holes: usize, cap: usize) -> impl Iterator<Item = Prod> {
    PRODS
        .into_iter()
        .filter(move |&p| len + holes + arity(p) <= cap)
}

fn to_expr(seq: &[Prod]) -> Expr {
    fn go(seq: &[Prod], i: &mut usize) -> Expr {
        let p = seq[*i];
        *i += 1;
        match p {
            Prod::Leaf(v) => Expr::var(v),
            Prod::Un(op) => Expr::unary(op, go(seq, i)),
            Prod::Bin(op) => {
                let a = go(seq, i);
                let b = go(seq, i);
                Expr::binary(op, a, b)
            }
        }
    }
    go(seq, &mut 0)
}

fn eval_seq(seq: &[Prod], x: u64, y: u64, c: u64, stack: &mut Vec<u64>) -> u64 {
    stack.clear();
    for &p in seq.iter().rev() {
        let v = match p {
            Prod::Leaf(Var::X) => x,
            Prod::Leaf(Var::Y) => y,
            Prod::Leaf(_) => c,
            Prod::Un(op) => {
                let a = stack.pop().unwrap();
                op.apply(a)
            }
            Prod::Bin(op) => {
                let a = stack.pop().unwrap();
                let b = stack.pop().unwrap();
                op.apply(a, b)
            }
        };
        stack.push(v);
    }
    stack[0]
}

/// Output similarity in [0, 1]: mean of bitwise agreement and closeness
/// in arithmetic distance.
fn similarity(a: u64, b: u64) -> f64 {
    let ham = 1.0 - (a ^ b).count_ones() as f64 / 64.0;
    let d = a.wrapping_sub(b).min(b.wrapping_sub(a));
    let ar = 1.0 - (64 - d.leading_zeros()) as f64 / 64.0;
    (ham + ar) / 2.0
}

fn sample_input(r: &mut StdRng) -> u64 {
    match r.gen_range(0..4) {
        0 | 1 => r.gen(),
        2 => r.gen_range(0..256),
        _ => EDGE_CASES[r.gen_range(0..EDGE_CASES.len())],
    }
}

struct Node {
    seq: Vec<Prod>,
    children: Vec<usize>,
    untried: Vec<Prod>,
    visits: f64,
    value: f64,
    /// Fully explored: a complete non-solution, or all children dead.
    dead: bool,
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    /// Candidate agreeing with the oracle on every sample and probe.
    pub expr: Option<Expr>,
    pub best: Option<Expr>,
    pub best_score: f64,
    pub iterations: usize,
    pub timed_out: bool,
}

/// Search for an expression over `x`, `y`, `c` reproducing `oracle`.
pub fn synthesize_oracle(
    oracle: &dyn Fn(u64, u64, u64) -> u64,
    budget: &SynthBudget,
    seed: u64,
) -> SynthOutcome {
    let start = Instant::now();
    let mut r = rng(seed);
    let ins: Vec<(u64, u64, u64)> = (0..budget.samples)
        .map(|_| {
            (
                sample_input(&mut r),
                sample_input(&mut r),
                sample_input(&mut r),
            )
        })
        .collect();
    let outs: Vec<u64> = ins.iter().map(|&(x, y, c)| oracle(x, y, c)).collect();
    let mut probes: Vec<(u64, u64, u64)> = (0..budget.probes)
        .map(|_| (r.gen(), r.gen(), r.gen()))
        .collect();
    probes.extend(
        EDGE_CASES
            .iter()
            .flat_map(|&a| EDGE_CASES.iter().map(move |&b| (a, b, a ^ b))),
    );
    let probe_outs: Vec<u64> = probes.iter().map(|&(x, y, c)| oracle(x, y, c)).collect();
    let cap = budget.max_depth.max(1);
    let mut stack = Vec::with_capacity(cap);

    let score = |seq: &[Prod], stack: &mut Vec<u64>| -> (f64, bool) {
        let mut total = 0.0;
        let mut exact = true;
        for (&(x, y, c), &want) in ins.iter().zip(&outs) {
            let got = eval_seq(seq, x, y, c, stack);
            exact &= got == want;
            total += similarity(got, want);
        }
        if exact {
            exact = probes
                .iter()
                .zip(&probe_outs)
                .all(|(&(x, y, c), &want)| eval_seq(seq, x, y, c, stack) == want);
        }
        (total / ins.len().max(1) as f64, exact)
    };

    let root_untried: Vec<Prod> = allowed(0, 1, cap).collect();
    let mut tree = vec![Node {
        seq: vec![],
        children: vec![],
        untried: root_untried,
        visits: 0.0,
        value: 0.0,
        dead: false,
    }];
    tree[0].untried.shuffle(&mut r);
    let mut best: Option<(f64, Vec<Prod>)> = None;
    let mut timed_out = false;
    let mut it = 0;
    while it < budget.iterations {
        it += 1;
        if it % 1024 == 0 && start.elapsed() > budget.wall_clock {
            timed_out = true;
            break;
        }
        // Selection.
        let mut path = vec![0usize];
        let mut cur = 0usize;
        while tree[cur].untried.is_empty() {
            let ln = tree[cur].visits.max(1.0).ln();
            let c = budget.uct_constant;
            let ucb = |n: &Node| n.value / n.visits + c * (ln / n.visits).sqrt();
            let next = tree[cur]
                .children
                .iter()
                .copied()
                .filter(|&n| !tree[n].dead)
                .max_by(|&a, &b| ucb(&tree[a]).total_cmp(&ucb(&tree[b])));
            match next {
                Some(n) => {
                    cur = n;
                    path.push(cur);
                }
                None => break,
            }
        }
        if tree[cur].untried.is_empty() && holes(&tree[cur].seq) > 0 {
            // Every child is dead.
            tree[cur].dead = true;
            if cur == 0 {
                break;
            }
            continue;
        }
        // Expansion.
        if let Some(p) = tree[cur].untried.pop() {
            let mut seq = tree[cur].seq.clone();
            seq.push(p);
            let h = holes(&seq);
            let mut untried: Vec<Prod> = if h == 0 {
                vec![]
            } else {
                allowed(seq.len(), h, cap).collect()
            };
            untried.shuffle(&mut r);
            tree.push(Node {
                seq,
                children: vec![],
                untried,
                visits: 0.0,
                value: 0.0,
                dead: false,
            });
            let id = tree.len() - 1;
            tree[cur].children.push(id);
            cur = id;
            path.push(cur);
        }
        // Simulation: fill the remaining holes left to right.
        let mut seq = tree[cur].seq.clone();
        let mut h = holes(&seq);
        while h > 0 {
            let p = if r.gen_bool(0.5) {
                *LEAVES.choose(&mut r).unwrap()
            } else {
                let opts: Vec<Prod> = allowed(seq.len(), h, cap).collect();
                *opts.choose(&mut r).unwrap()
            };
            seq.push(p);
            h = h - 1 + arity(p);
        }
        if holes(&tree[cur].seq) == 0 {
            tree[cur].dead = true;
        }
        let (reward, exact) = score(&seq, &mut stack);
        if exact {
            return SynthOutcome {
                expr: Some(to_expr(&seq)),
                best: Some(to_expr(&seq)),
                best_score: 1.0,
                iterations: it,
                timed_out: false,
            };
        }
        if best.as_ref().is_none_or(|(s, _)| reward > *s) {
            best = Some((reward, seq));
        }
        for &n in &path {
            tree[n].visits += 1.0;
            tree[n].value += reward;
        }
    }
    let (best_score, best) = best.map_or((0.0, None), |(s, q)| (s, Some(to_expr(&q))));
    SynthOutcome {
        expr: None,
        best,
        best_score,
        iterations: it,
        timed_out,
    }
}

/// Query the handler at the observed key and synthesize its behavior.
pub fn synthesize_semantics(
    t: &AttackTarget<'_>,
    budget: &SynthBudget,
    seed: u64,
) -> Result<AttackReport, AttackError> {
    let Mode::Dynamic { k, .. } = t.mode else {
        return Err(AttackError::NeedsDynamic("synthesis"));
    };
    let start = Instant::now();
    let h = t.handler;
    let oracle = |x, y, c| h.eval(x, y, c, k);
    let out = synthesize_oracle(&oracle, budget, seed);
    let mut r = AttackReport::new(AttackKind::Synth, t.mode, h, seed);
    r.success = out
        .expr
        .as_ref()
        .is_some_and(|e| confirms(e, &t.ground_truth));
    r.output = out
        .expr
        .as_ref()
        .or(out.best.as_ref())
        .map(|e| e.to_string());
    r.budget_spent = out.iterations as u64;
    r.budget_exhausted = out.expr.is_none();
    r.meta.insert("config".into(), budget.describe());
    r.meta
        .insert("best_score".into(), format!("{:.4}", out.best_score));
    if out.timed_out {
        r.meta.insert("timed_out".into(), "true".into());
    }
    r.time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(r)
}
