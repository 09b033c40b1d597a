//! Counterexample-guided key recovery against a semantic codebook.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::Rng;

use super::{AttackError, AttackKind, AttackReport, AttackTarget, Mode};
use crate::expr::{normalize, Assignment, BinOp, CompiledExpr, Expr, Node, Var, EDGE_CASES};
use crate::rng::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CegarBudget {
    /// Candidate keys tried, trial divisions included.
    pub candidates: u64,
    /// Factor constants `n` of syntactically visible divisibility checks.
    pub trial_division: bool,
    /// Enumerate the key bytes the expression reads when that space fits
    /// the budget; otherwise randomize only those bytes.
    pub key_bytes: bool,
    pub verify_samples: usize,
    pub wall_clock: Duration,
}

impl Default for CegarBudget {
    fn default() -> Self {
        CegarBudget {
            candidates: 1_000_000,
            trial_division: true,
            key_bytes: true,
            verify_samples: 10_000,
            wall_clock: Duration::from_secs(60),
        }
    }
}

impl CegarBudget {
    /// Random keys only.
    pub fn black_box(candidates: u64) -> Self {
        CegarBudget {
            candidates,
            trial_division: false,
            key_bytes: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CegarOutcome {
    pub key: Option<u64>,
    /// Codebook entry matched by the key.
    pub entry: Option<usize>,
    pub spent: u64,
    pub counterexamples: usize,
    pub exhausted: bool,
}

struct Structure {
    divisors_of: Vec<u64>,
    key_bytes: Vec<u8>,
    full_key: bool,
}

fn structure(f: &Expr) -> Structure {
    let mut divisors_of = BTreeSet::new();
    let mut key_bytes = BTreeSet::new();
    let mut full_key = false;
    for n in normalize(f).dag_nodes() {
        match n.node() {
            Node::Binary(BinOp::Divides, a, b) if b.vars().contains(Var::K) => {
                if let Some(c) = a.as_const() {
                    divisors_of.insert(c);
                }
            }
            Node::KeyByte(i) => {
                key_bytes.insert(*i);
            }
            Node::Var(Var::K) => full_key = true,
            _ => {}
        }
    }
    Structure {
        divisors_of: divisors_of.into_iter().collect(),
        key_bytes: key_bytes.into_iter().collect(),
        full_key,
    }
}

/// Search `k` with `f(x, y, c, k) == g(x, y, c)` for some codebook entry
/// `g`. The candidate finder proposes keys consistent with the current
/// sample set; the counterexample finder tests a proposal on
/// `verify_samples` fresh inputs and feeds the first disagreement back.
pub fn cegar_on_expr(f: &Expr, codebook: &[Expr], budget: &CegarBudget, seed: u64) -> CegarOutcome {
    let start = Instant::now();
    let mut r = rng(seed);
    let fc = CompiledExpr::new(f);
    let gcs: Vec<CompiledExpr> = codebook.iter().map(CompiledExpr::new).collect();
    let st = structure(f);
    let mut scratch = Vec::new();
    let mut verify: Vec<(u64, u64, u64)> = EDGE_CASES
        .iter()
        .flat_map(|&a| EDGE_CASES.iter().map(move |&b| (a, b, b ^ a)))
        .collect();
    verify.extend((0..budget.verify_samples).map(|_| (r.gen(), r.gen(), r.gen())));
    // Per codebook entry: sample set and expected outputs.
    let mut samples: Vec<Vec<(Assignment, u64)>> = gcs
        .iter()
        .map(|g| {
            (0..4)
                .map(|_| {
                    let a = Assignment::new(r.gen(), r.gen(), r.gen(), 0);
                    (a, g.eval(&a))
                })
                .collect()
        })
        .collect();
    let mut spent = 0u64;
    let mut cex = 0usize;

    let mut check =
        |k: u64, samples: &mut Vec<Vec<(Assignment, u64)>>, cex: &mut usize| -> Option<usize> {
            for (gi, g) in gcs.iter().enumerate() {
                let ok = samples[gi]
                    .iter()
                    .all(|(a, want)| fc.eval_into(&Assignment { k, ..*a }, &mut scratch) == *want);
                if !ok {
                    continue;
                }
                let bad = verify.iter().find(|&&(x, y, c)| {
                    let a = Assignment::new(x, y, c, k);
                    fc.eval_into(&a, &mut scratch) != g.eval(&a)
                });
                match bad {
                    None => return Some(gi),
                    Some(&(x, y, c)) => {
                        let a = Assignment::new(x, y, c, 0);
                        samples[gi].push((a, g.eval(&a)));
                        *cex += 1;
                    }
                }
            }
            None
        };
    let done = |key, entry, spent, cex| CegarOutcome {
        key: Some(key),
        entry: Some(entry),
        spent,
        counterexamples: cex,
        exhausted: false,
    };

    if budget.trial_division {
        for &n in &st.divisors_of {
            let mut d = 2u64;
            while d.saturating_mul(d) <= n {
                if spent >= budget.candidates {
                    return CegarOutcome {
                        key: None,
                        entry: None,
                        spent,
                        counterexamples: cex,
                        exhausted: true,
                    };
                }
                spent += 1;
                if n % d == 0 {
                    for k in [d, n / d] {
                        if let Some(gi) = check(k, &mut samples, &mut cex) {
                            return done(k, gi, spent, cex);
                        }
                    }
                }
                d += 1;
            }
        }
    }
    let bytes = &st.key_bytes;
    let enumerable = budget.key_bytes
        && !st.full_key
        && !bytes.is_empty()
        && bytes.len() <= 3
        && (1u64 << (8 * bytes.len())) <= budget.candidates - spent.min(budget.candidates);
    let spread = |v: u64, base: u64| {
        bytes.iter().enumerate().fold(base, |k, (j, &b)| {
            (k & !(0xff << (8 * b))) | (((v >> (8 * j)) & 0xff) << (8 * b))
        })
    };
    let mut i = 0u64;
    while spent < budget.candidates {
        if spent.is_multiple_of(4096) && start.elapsed() > budget.wall_clock {
            break;
        }
        spent += 1;
        let k = if enumerable {
            if i >> (8 * bytes.len()) != 0 {
                break;
            }
            i += 1;
            spread(i - 1, 0)
        } else if budget.key_bytes && !st.full_key && !bytes.is_empty() {
            spread(r.gen(), 0)
        } else {
            r.gen()
        };
        if let Some(gi) = check(k, &mut samples, &mut cex) {
            return done(k, gi, spent, cex);
        }
    }
    CegarOutcome {
        key: None,
        entry: None,
        spent,
        counterexamples: cex,
        exhausted: true,
    }
}

pub fn cegar_key_recovery(
    t: &AttackTarget<'_>,
    codebook: &[Expr],
    budget: &CegarBudget,
    seed: u64,
) -> Result<AttackReport, AttackError> {
    if t.mode != Mode::Static {
        return Err(AttackError::NeedsStatic("CEGAR key recovery"));
    }
    let start = Instant::now();
    let out = cegar_on_expr(&t.handler.merged, codebook, budget, seed);
    let mut r = AttackReport::new(AttackKind::Cegar, t.mode, t.handler, seed);
    r.success = out.key.is_some();
    r.recovered_key = out.key;
    r.budget_spent = out.spent;
    r.budget_exhausted = out.exhausted;
    if let Some(i) = out.entry {
        r.output = Some(codebook[i].to_string());
    }
    r.meta
        .insert("counterexamples".into(), out.counterexamples.to_string());
    r.time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{factorization_expr, random_prime};

    #[test]
    fn trial_division_recovers_factor_key() {
        let mut r = rng(9);
        let p = random_prime(16, &mut r).unwrap();
        let q = random_prime(16, &mut r).unwrap();
        let f = factorization_expr(p * q) * (Expr::x() + Expr::y());
        let out = cegar_on_expr(
            &f,
            &[Expr::x() - Expr::y(), Expr::x() + Expr::y()],
            &CegarBudget::default(),
            1,
        );
        let k = out.key.unwrap();
        assert!(k == p || k == q);
        assert_eq!(out.entry, Some(1));
        assert!(out.spent <= 1 << 16);
    }

    #[test]
    fn key_byte_enumeration() {
        // Equals x + y only when byte 1 of k is 0x5b.
        let f = crate::expr::parse_expr("(mul (xor (keybyte 1) 0x5a) (add x y))").unwrap();
        let out = cegar_on_expr(&f, &[Expr::x() + Expr::y()], &CegarBudget::default(), 2);
        assert_eq!(out.key.map(|k| (k >> 8) & 0xff), Some(0x5b));
    }

    #[test]
    fn black_box_gives_up() {
        let f = factorization_expr(4_294_967_291u64 * 4_294_967_279) * Expr::x();
        let out = cegar_on_expr(&f, &[Expr::x()], &CegarBudget::black_box(10_000), 3);
        assert!(out.exhausted && out.key.is_none());
        assert_eq!(out.spent, 10_000);
    }
}
