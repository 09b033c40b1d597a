//! Raw measurements behind the benchmark suite. Thresholds live in the
//! suite runner; everything here only counts.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;

use super::{random_program, shipped_programs, verify, BenchError, Mismatch};
use crate::attacks::{
    backward_slice, cegar_key_recovery, lower, mba_diversity, simplify_with_rules, slice_code,
    symbolic_execute, symex_simplify, synthesize_oracle, taint_forward, AttackTarget, CegarBudget,
    Diversity, Granularity, RuleSet, SymexBudget, SynthBudget,
};
use crate::expr::{
    check_equiv, normalize, Assignment, BinOp, CompiledExpr, EquivStrategy, Expr, UnOp, EDGE_CASES,
};
use crate::keys::EncodingKind;
use crate::obfuscate::{
    build_handler, build_superoperators, obfuscate, random_semantics, CoreSemantics, Handler,
    ObfuscationConfig,
};
use crate::rewrite::{RewriteConfig, Rewriter};
use crate::rng::{derive, rng, Rng as StdRng};
use crate::synth::{synthesize_classes, EquivClassDb, SynthConfig};

const SMALL_MAX: usize = 7;
const SMALL_VECTORS: usize = 24;

/// Every function of `x`, `y`, `c` computable by an expression of at most
/// seven nodes, keyed by its outputs on fixed vectors, with its shortest
/// size. Built by bottom-up enumeration with observational dedup.
pub struct SmallFunctions {
    inputs: Vec<(u64, u64, u64)>,
    shortest: HashMap<Vec<u64>, usize>,
}

impl SmallFunctions {
    pub fn build() -> SmallFunctions {
        let mut r = rng(0x5a11);
        let mut inputs: Vec<(u64, u64, u64)> = EDGE_CASES
            .iter()
            .map(|&e| (e, e.rotate_left(17), !e))
            .collect();
        while inputs.len() < SMALL_VECTORS {
            inputs.push((r.gen(), r.gen(), r.gen()));
        }
        let mut shortest: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut by_size: Vec<Vec<Vec<u64>>> = vec![vec![]; SMALL_MAX + 1];
        let mut add = |v: Vec<u64>, size: usize, by_size: &mut Vec<Vec<Vec<u64>>>| {
            if let std::collections::hash_map::Entry::Vacant(e) = shortest.entry(v.clone()) {
                e.insert(size);
                by_size[size].push(v);
            }
        };
        for pick in [
            |t: &(u64, u64, u64)| t.0,
            |t: &(u64, u64, u64)| t.1,
            |t: &(u64, u64, u64)| t.2,
        ] {
            add(inputs.iter().map(pick).collect(), 1, &mut by_size);
        }
        for size in 2..=SMALL_MAX {
            let mut fresh = Vec::new();
            for a in &by_size[size - 1] {
                for op in UnOp::ALL {
                    fresh.push(a.iter().map(|&v| op.apply(v)).collect());
                }
            }
            for l in 1..size - 1 {
                for a in &by_size[l] {
                    for b in &by_size[size - 1 - l] {
                        for op in [
                            BinOp::Add,
                            BinOp::Sub,
                            BinOp::Mul,
                            BinOp::And,
                            BinOp::Or,
                            BinOp::Xor,
                        ] {
                            fresh.push(a.iter().zip(b).map(|(&u, &v)| op.apply(u, v)).collect());
                        }
                    }
                }
            }
            for v in fresh {
                add(v, size, &mut by_size);
            }
        }
        SmallFunctions { inputs, shortest }
    }

    /// Size of the shortest equivalent found, if it has at most seven nodes.
    pub fn shortest(&self, e: &Expr) -> Option<usize> {
        let c = CompiledExpr::new(e);
        let v: Vec<u64> = self
            .inputs
            .iter()
            .map(|&(x, y, cc)| c.eval(&Assignment::new(x, y, cc, 0)))
            .collect();
        self.shortest.get(&v).copied()
    }
}

fn small_functions() -> &'static SmallFunctions {
    static SMALL: OnceLock<SmallFunctions> = OnceLock::new();
    SMALL.get_or_init(SmallFunctions::build)
}

/// Random semantics of semantic depth `depth`: the normalized form has
/// `depth` nodes and no expression of at most seven nodes agrees with it
/// on the fingerprint vectors except at its own size.
pub fn semantics_of_depth(depth: usize, rng: &mut StdRng) -> Expr {
    let small = small_functions();
    for _ in 0..100_000 {
        let e = random_semantics(depth, rng);
        if normalize(&e).size() as usize == depth && small.shortest(&e).is_none_or(|s| s >= depth) {
            return e;
        }
    }
    random_semantics(depth, rng)
}

/// `n` handlers over random semantics of the given depth, each from its own
/// derived seed.
pub fn handler_corpus(
    n: usize,
    depth: usize,
    rw: Option<&Rewriter>,
    cfg: &ObfuscationConfig,
    seed: u64,
) -> Result<Vec<Handler>, BenchError> {
    let (lo, hi) = cfg.slots_per_handler;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(derive(seed, i as u64));
            let slots = r.gen_range(lo..=hi);
            let sems = (0..slots)
                .map(|_| CoreSemantics::new(semantics_of_depth(depth, &mut r)))
                .collect();
            Ok(build_handler(i, sems, rw, cfg, &mut r)?)
        })
        .collect()
}

/// Config with MBA rewriting at fixed bounds (`None` disables it).
pub fn config_with_bounds(bounds: Option<(usize, usize)>) -> ObfuscationConfig {
    ObfuscationConfig {
        rewrite: bounds.map(|(a, b)| RewriteConfig::with_bounds(a, b, 0)),
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyRun {
    pub program: String,
    pub seed: u64,
    pub steps: usize,
    pub tested: usize,
    pub mismatch: Option<Mismatch>,
}

/// Obfuscate each shipped program under `seeds` seeds and fuzz the result.
pub fn correctness(
    rw: &Rewriter,
    seeds: u64,
    inputs: usize,
    seed: u64,
) -> Result<Vec<VerifyRun>, BenchError> {
    let programs = shipped_programs();
    let jobs: Vec<(usize, u64)> = (0..programs.len())
        .flat_map(|p| (0..seeds).map(move |s| (p, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(p, s)| {
            let prog = &programs[p];
            let job = derive(derive(seed, p as u64), s);
            let cfg = ObfuscationConfig {
                seed: job,
                ..Default::default()
            };
            let o = obfuscate(prog, Some(rw), &cfg)?;
            let v = verify(prog, &o.bytecode, &o.handlers, inputs, derive(job, 1))?;
            Ok(VerifyRun {
                program: prog.name.clone(),
                seed: job,
                steps: o.bytecode.steps.len(),
                tested: v.tested,
                mismatch: v.mismatch,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Soundness {
    pub classes: usize,
    pub members: usize,
    /// Members also checked over all 8-bit inputs.
    pub exhaustive: usize,
    pub violations: Vec<String>,
}

/// Check every verified member against its representative on fresh
/// samples and, where sound, exhaustively at 8 bits.
pub fn class_soundness(db: &EquivClassDb, samples: usize, seed: u64) -> Soundness {
    let per: Vec<Soundness> = db
        .classes()
        .par_iter()
        .enumerate()
        .map(|(ci, class)| {
            let mut s = Soundness {
                classes: 1,
                ..Default::default()
            };
            for m in class.verified_members() {
                s.members += 1;
                let sampled = check_equiv(
                    m,
                    &class.representative,
                    &EquivStrategy::RandomSampling {
                        n: samples,
                        seed: derive(seed, ci as u64),
                    },
                );
                if !matches!(sampled, Ok(v) if v.is_equivalent()) {
                    s.violations
                        .push(format!("{m} vs {} (sampled)", class.representative));
                    continue;
                }
                match check_equiv(
                    m,
                    &class.representative,
                    &EquivStrategy::ExhaustiveNarrow { bits: 8 },
                ) {
                    Ok(v) if v.is_equivalent() => s.exhaustive += 1,
                    Ok(_) => s
                        .violations
                        .push(format!("{m} vs {} (8-bit)", class.representative)),
                    Err(_) => {}
                }
            }
            s
        })
        .collect();
    per.into_iter().fold(Soundness::default(), |mut a, b| {
        a.classes += b.classes;
        a.members += b.members;
        a.exhaustive += b.exhaustive;
        a.violations.extend(b.violations);
        a
    })
}

/// Text serializations of two DB builds on different worker counts.
pub fn db_determinism(
    depth: usize,
    seed: u64,
    workers: (usize, usize),
) -> Result<(String, String), BenchError> {
    let build = |w| -> Result<String, BenchError> {
        let cfg = SynthConfig {
            workers: Some(w),
            ..SynthConfig::new(depth, 1000, seed)
        };
        Ok(synthesize_classes(&cfg)?.to_text())
    };
    Ok((build(workers.0)?, build(workers.1)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Growth {
    pub exprs: usize,
    pub not_preserved: usize,
    /// (bound, mean normalized syntactic depth).
    pub mean_depth: Vec<(usize, f64)>,
}

pub fn rewriter_growth(rw: &Rewriter, n: usize, bounds: &[usize], seed: u64) -> Growth {
    let exprs: Vec<Expr> = (0..n)
        .map(|i| {
            let mut r = rng(derive(seed, i as u64));
            let d = r.gen_range(3..=7);
            semantics_of_depth(d, &mut r)
        })
        .collect();
    let not_preserved = exprs
        .par_iter()
        .enumerate()
        .filter(|(i, e)| {
            let cfg = RewriteConfig::with_bounds(20, 30, derive(seed ^ 0x77, *i as u64));
            match rw.rewrite(e, &cfg) {
                Ok(out) => !matches!(
                    check_equiv(&out, e, &EquivStrategy::RandomSampling { n: 10_000, seed: *i as u64 }),
                    Ok(v) if v.is_equivalent()
                ),
                Err(_) => true,
            }
        })
        .count();
    let mean_depth = bounds
        .iter()
        .map(|&b| {
            let total: u64 = exprs
                .par_iter()
                .enumerate()
                .map(|(i, e)| {
                    let mut r = rng(derive(seed ^ b as u64, i as u64));
                    normalize(&rw.rewrite_iterations(e, b, 0.25, 8, &mut r)).size()
                })
                .sum();
            (b, total as f64 / n.max(1) as f64)
        })
        .collect();
    Growth {
        exprs: n,
        not_preserved,
        mean_depth,
    }
}

/// (pairs checked, violations) of `e_i(key_j) == [i == j]`.
pub fn point_property(handlers: &[Handler]) -> (usize, usize) {
    let mut pairs = 0;
    let mut bad = 0;
    for h in handlers {
        for (i, s) in h.slots.iter().enumerate() {
            for (j, &k) in h.key_set.keys.iter().enumerate() {
                pairs += 1;
                bad += (s.encoding.eval(k) != (i == j) as u64) as usize;
            }
        }
    }
    (pairs, bad)
}

/// Successful static symbolic simplifications, one random slot per handler.
pub fn static_symex(handlers: &[Handler], rules: &RuleSet, seed: u64) -> usize {
    handlers
        .par_iter()
        .filter(|h| {
            let slot = rng(derive(seed, h.id as u64)).gen_range(0..h.slots.len());
            symex_simplify(
                &AttackTarget::static_slot(h, slot),
                rules,
                &SymexBudget::default(),
                seed,
            )
            .success
        })
        .count()
}

/// Dynamic symbolic simplification rate at the key of a random slot.
pub fn dynamic_symex_rate(handlers: &[Handler], rules: &RuleSet, seed: u64) -> f64 {
    let ok = handlers
        .par_iter()
        .filter(|h| {
            let slot = rng(derive(seed, h.id as u64)).gen_range(0..h.slots.len());
            let t = AttackTarget::dynamic(h, h.key_set.keys[slot], None).expect("own key");
            symex_simplify(&t, rules, &SymexBudget::default(), seed).success
        })
        .count();
    ok as f64 / handlers.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymexTrend {
    pub bound0: f64,
    pub depth3: f64,
    pub depth5: f64,
    pub sweep: Vec<(usize, f64)>,
}

pub fn symex_trend(
    rw: &Rewriter,
    n: usize,
    sweep: &[usize],
    rules: &RuleSet,
    seed: u64,
) -> Result<SymexTrend, BenchError> {
    let no_super = |b| ObfuscationConfig {
        superop_bounds: (0, 0),
        ..config_with_bounds(Some((b, b)))
    };
    let rate = |depth, cfg: &ObfuscationConfig, s| -> Result<f64, BenchError> {
        Ok(dynamic_symex_rate(
            &handler_corpus(n, depth, Some(rw), cfg, s)?,
            rules,
            s,
        ))
    };
    let bound0 = rate(3, &no_super(0), derive(seed, 0))?;
    let depth3 = rate(3, &config_with_bounds(Some((20, 30))), derive(seed, 1))?;
    let depth5 = rate(5, &config_with_bounds(Some((20, 30))), derive(seed, 2))?;
    let sweep = sweep
        .iter()
        .map(|&b| Ok((b, rate(3, &no_super(b), derive(seed, 3))?)))
        .collect::<Result<_, BenchError>>()?;
    Ok(SymexTrend {
        bound0,
        depth3,
        depth5,
        sweep,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaintSlice {
    pub handlers: usize,
    pub taint_unmarked: f64,
    pub slice_unmarked: f64,
    pub taint_min: f64,
    pub taint_max: f64,
    /// Handlers where slicing leaves more unmarked than taint.
    pub order_violations: usize,
    /// Input-dependent computations reaching the output that taint missed.
    pub core_unmarked: usize,
}

pub fn taint_slice(handlers: &[Handler], traces: usize, seed: u64) -> TaintSlice {
    let rows: Vec<(f64, f64, usize)> = handlers
        .par_iter()
        .map(|h| {
            let t = AttackTarget::static_slot(h, 0);
            let taint = taint_forward(&t, Granularity::Bit, seed);
            let slice = backward_slice(&t, seed);
            let code = lower(&h.merged);
            let marks = crate::attacks::taint_code(
                &code,
                &[
                    crate::attacks::REG_X,
                    crate::attacks::REG_Y,
                    crate::attacks::REG_C,
                    crate::attacks::REG_K,
                ],
                &[],
                Granularity::Bit,
            );
            let live = slice_code(&code);
            let mut r = rng(derive(seed, h.id as u64));
            let trs: Vec<Vec<Option<u64>>> = (0..traces)
                .map(|_| code.trace(r.gen(), r.gen(), r.gen(), r.gen()))
                .collect();
            let missed = (0..code.instrs.len())
                .filter(|&j| {
                    code.instrs[j].is_compute()
                        && live[j]
                        && !marks[j]
                        && trs.iter().any(|t| t[j] != trs[0][j])
                })
                .count();
            (
                taint.unmarked_fraction.unwrap_or(0.0),
                slice.unmarked_fraction.unwrap_or(0.0),
                missed,
            )
        })
        .collect();
    let n = rows.len().max(1) as f64;
    TaintSlice {
        handlers: rows.len(),
        taint_unmarked: rows.iter().map(|r| r.0).sum::<f64>() / n,
        slice_unmarked: rows.iter().map(|r| r.1).sum::<f64>() / n,
        taint_min: rows.iter().map(|r| r.0).fold(f64::INFINITY, f64::min),
        taint_max: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        order_violations: rows.iter().filter(|r| r.1 > r.0).count(),
        core_unmarked: rows.iter().map(|r| r.2).sum(),
    }
}

/// Fraction of `exprs` the synthesizer reproduces within `iterations`.
pub fn synthesis_rate(exprs: &[Expr], iterations: usize, seed: u64) -> f64 {
    let ok = exprs
        .par_iter()
        .enumerate()
        .filter(|(i, e)| {
            let oracle = |x, y, c| e.eval(&Assignment::new(x, y, c, 0));
            let out = synthesize_oracle(&oracle, &SynthBudget::with_iterations(iterations), derive(seed, *i as u64));
            out.expr.is_some_and(|g| matches!(check_equiv(&g, e, &EquivStrategy::RandomSampling { n: 10_000, seed: 1 }), Ok(v) if v.is_equivalent()))
        })
        .count();
    ok as f64 / exprs.len().max(1) as f64
}

/// (depth, success rate) over `per_depth` random expressions per depth.
pub fn synthesis_curve(
    depths: &[usize],
    per_depth: usize,
    iterations: usize,
    seed: u64,
) -> Vec<(usize, f64)> {
    depths
        .iter()
        .map(|&d| {
            let mut r = rng(derive(seed, d as u64));
            let exprs: Vec<Expr> = (0..per_depth)
                .map(|_| semantics_of_depth(d, &mut r))
                .collect();
            (
                d,
                synthesis_rate(&exprs, iterations, derive(seed ^ 0x99, d as u64)),
            )
        })
        .collect()
}

/// Core semantics of random 40-instruction programs, in program order.
pub fn superop_semantics(
    bounds: (usize, usize),
    programs: usize,
    seed: u64,
) -> Result<Vec<Expr>, BenchError> {
    let mut out = Vec::new();
    for s in 0..programs as u64 {
        let p = random_program(40, 2, &mut rng(derive(seed, s)));
        let res = build_superoperators(
            &crate::ir::to_ssa(&p),
            bounds,
            &mut rng(derive(seed ^ 0x55, s)),
        )?;
        out.extend(res.semantics().map(|c| c.expr.clone()));
    }
    Ok(out)
}

/// First `n` semantics of the superoperator and single-instruction corpora.
pub fn superop_corpora(
    n: usize,
    bounds: (usize, usize),
    seed: u64,
) -> Result<(Vec<Expr>, Vec<Expr>), BenchError> {
    let take = |b: (usize, usize)| -> Result<Vec<Expr>, BenchError> {
        let mut programs = 8;
        loop {
            let mut v = superop_semantics(b, programs, seed)?;
            if v.len() >= n || programs > 100_000 {
                v.truncate(n);
                return Ok(v);
            }
            programs *= 2;
        }
    };
    Ok((take(bounds)?, take((0, 0))?))
}

/// Histogram of normalized semantic depths.
pub fn depth_histogram(exprs: &[Expr]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for e in exprs {
        *h.entry(normalize(e).size() as usize).or_insert(0) += 1;
    }
    h
}

/// Simplified dynamic views of `n` handlers that all contain `sem`,
/// simplified without MBA-specific rules.
pub fn diversity_corpus(
    rw: &Rewriter,
    sem: &Expr,
    n: usize,
    seed: u64,
) -> Result<Vec<Expr>, BenchError> {
    let cfg = ObfuscationConfig::default();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng(derive(seed, i as u64));
            let slots = r.gen_range(cfg.slots_per_handler.0..=cfg.slots_per_handler.1);
            let at = r.gen_range(0..slots);
            let mut sems: Vec<CoreSemantics> = (0..slots - 1)
                .map(|_| CoreSemantics::new(semantics_of_depth(3, &mut r)))
                .collect();
            sems.insert(at, CoreSemantics::new(sem.clone()));
            let h = build_handler(i, sems, Some(rw), &cfg, &mut r)?;
            let e = symbolic_execute(&lower(&h.merged), Some(h.key_set.keys[at]));
            Ok(simplify_with_rules(&e, &RuleSet::empty(), SymexBudget::default().steps).0)
        })
        .collect()
}

pub fn diversity(rw: &Rewriter, n: usize, seed: u64) -> Result<Diversity, BenchError> {
    let sem = Expr::x() + Expr::y();
    let a = diversity_corpus(rw, &sem, n, derive(seed, 0))?;
    let b = diversity_corpus(rw, &sem, n, derive(seed, 1))?;
    Ok(mba_diversity(&a, Some(&b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CegarRate {
    pub attempts: usize,
    pub recovered: usize,
    pub mean_spent: f64,
}

impl CegarRate {
    pub fn rate(&self) -> f64 {
        self.recovered as f64 / self.attempts.max(1) as f64
    }
}

/// Static CEGAR against handlers whose slots all use `kind`. The codebook is
/// the handler's own slot semantics; success means the key found selects
/// the matched entry.
pub fn cegar_rate(
    rw: &Rewriter,
    n: usize,
    kind: EncodingKind,
    prime_bits: u32,
    budget: &CegarBudget,
    seed: u64,
) -> Result<CegarRate, BenchError> {
    let cfg = ObfuscationConfig {
        key_kind: Some(kind),
        prime_bits,
        ..Default::default()
    };
    let hs = handler_corpus(n, 3, Some(rw), &cfg, seed)?;
    let rows: Vec<(bool, u64)> = hs
        .par_iter()
        .map(|h| {
            let codebook: Vec<Expr> = h.slots.iter().map(|s| s.sem.expr.clone()).collect();
            let t = AttackTarget::static_slot(h, 0);
            let r = cegar_key_recovery(&t, &codebook, budget, derive(seed, h.id as u64))
                .expect("static target");
            // The key must make the handler behave as the matched entry.
            let entry = r
                .output
                .as_ref()
                .and_then(|o| codebook.iter().position(|g| &g.to_string() == o));
            let ok = match (r.recovered_key, entry) {
                (Some(k), Some(i)) => {
                    let mut q = rng(derive(seed ^ 0xce, h.id as u64));
                    (0..1000).all(|_| {
                        let a = Assignment::new(q.gen(), q.gen(), q.gen(), k);
                        h.eval(a.x, a.y, a.c, k) == codebook[i].eval(&a)
                    })
                }
                _ => false,
            };
            (ok, r.budget_spent)
        })
        .collect();
    Ok(CegarRate {
        attempts: rows.len(),
        recovered: rows.iter().filter(|r| r.0).count(),
        mean_spent: rows.iter().map(|r| r.1 as f64).sum::<f64>() / rows.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    #[test]
    fn small_functions_find_shorter_forms() {
        let s = small_functions();
        assert_eq!(
            s.shortest(&parse_expr("(or x (sub (or x c) (not (or c (not x)))))").unwrap()),
            Some(3)
        );
        assert_eq!(
            s.shortest(&parse_expr("(sub (add (add y c) (sub (not y) y)) (not y))").unwrap()),
            Some(1)
        );
        assert_eq!(s.shortest(&parse_expr("(add x y)").unwrap()), Some(3));
    }

    #[test]
    fn depth_filter_keeps_exact_small_depths() {
        let mut r = rng(3);
        for d in [3, 5, 7] {
            for _ in 0..20 {
                let e = semantics_of_depth(d, &mut r);
                assert_eq!(small_functions().shortest(&e), Some(d));
            }
        }
    }
}
