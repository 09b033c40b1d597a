//! Layered equivalence checking.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{smt, Assignment, BinOp, Columns, CompiledExpr, Expr, ExprError, Node, Var, VarSet};

/// Edge-case patterns tried for every variable before random sampling.
pub const EDGE_CASES: [u64; 6] = [
    0x0000_0000_0000_0000,
    0xffff_ffff_ffff_ffff,
    0x8000_0000_0000_0000,
    0x0000_0000_0000_0001,
    0xaaaa_aaaa_aaaa_aaaa,
    0x5555_5555_5555_5555,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EquivStrategy {
    RandomSampling { n: usize, seed: u64 },
    ExhaustiveNarrow { bits: u32 },
    SmtExport { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EquivVerdict {
    EquivalentUpToSampling { samples: usize },
    EquivalentExhaustive { bits: u32 },
    Inequivalent { counterexample: Assignment },
    Unknown { query: PathBuf },
}

impl EquivVerdict {
    pub fn is_equivalent(&self) -> bool {
        matches!(
            self,
            EquivVerdict::EquivalentUpToSampling { .. } | EquivVerdict::EquivalentExhaustive { .. }
        )
    }
    pub fn is_inequivalent(&self) -> bool {
        matches!(self, EquivVerdict::Inequivalent { .. })
    }
}

pub fn check_equiv(
    a: &Expr,
    b: &Expr,
    strategy: &EquivStrategy,
) -> Result<EquivVerdict, ExprError> {
    match strategy {
        EquivStrategy::RandomSampling { n, seed } => Ok(sample_equiv(a, b, *n, *seed)),
        EquivStrategy::ExhaustiveNarrow { bits } => exhaustive_equiv(a, b, *bits),
        EquivStrategy::SmtExport { path } => {
            std::fs::write(path, smt::smtlib_disequality(a, b))?;
            Ok(EquivVerdict::Unknown {
                query: path.clone(),
            })
        }
    }
}

/// Exhaustive 8-bit check where sound, always followed by `samples` random
/// 64-bit assignments plus edge cases.
pub fn prove_equiv(a: &Expr, b: &Expr, samples: usize, seed: u64) -> EquivVerdict {
    let narrow = if narrow_sound(a, 8).is_ok()
        && narrow_sound(b, 8).is_ok()
        && a.vars().union(b.vars()).len() <= 3
    {
        exhaustive_equiv(a, b, 8).ok()
    } else {
        None
    };
    if let Some(v @ EquivVerdict::Inequivalent { .. }) = &narrow {
        return v.clone();
    }
    let s = sample_equiv(a, b, samples, seed);
    match (s, narrow) {
        (s @ EquivVerdict::Inequivalent { .. }, _) => s,
        (_, Some(n)) => n,
        (s, None) => s,
    }
}

fn edge_assignments(vars: VarSet) -> Vec<Assignment> {
    let vs: Vec<Var> = vars.iter().collect();
    let total = EDGE_CASES.len().pow(vs.len() as u32);
    (0..total)
        .map(|mut i| {
            let mut a = Assignment::default();
            for v in &vs {
                a.set(*v, EDGE_CASES[i % EDGE_CASES.len()]);
                i /= EDGE_CASES.len();
            }
            a
        })
        .collect()
}

/// Evaluate both sides over a list of assignments; first mismatch wins.
fn first_mismatch(ca: &CompiledExpr, cb: &CompiledExpr, pts: &[Assignment]) -> Option<Assignment> {
    let cols: [Vec<u64>; 4] = [
        pts.iter().map(|p| p.x).collect(),
        pts.iter().map(|p| p.y).collect(),
        pts.iter().map(|p| p.c).collect(),
        pts.iter().map(|p| p.k).collect(),
    ];
    let c = Columns {
        x: &cols[0],
        y: &cols[1],
        c: &cols[2],
        k: &cols[3],
    };
    let mut oa = vec![0; pts.len()];
    let mut ob = vec![0; pts.len()];
    ca.eval_batch(&c, &mut oa);
    cb.eval_batch(&c, &mut ob);
    (0..pts.len()).find(|&i| oa[i] != ob[i]).map(|i| pts[i])
}

fn sample_equiv(a: &Expr, b: &Expr, n: usize, seed: u64) -> EquivVerdict {
    let vars = a.vars().union(b.vars());
    let (ca, cb) = (CompiledExpr::new(a), CompiledExpr::new(b));
    let edges = edge_assignments(vars);
    if let Some(cex) = first_mismatch(&ca, &cb, &edges) {
        return EquivVerdict::Inequivalent {
            counterexample: cex,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut done = 0;
    while done < n {
        let m = (n - done).min(1024);
        let pts: Vec<Assignment> = (0..m)
            .map(|_| {
                let mut p = Assignment::default();
                for v in vars.iter() {
                    p.set(v, rng.gen());
                }
                p
            })
            .collect();
        if let Some(cex) = first_mismatch(&ca, &cb, &pts) {
            return EquivVerdict::Inequivalent {
                counterexample: cex,
            };
        }
        done += m;
    }
    EquivVerdict::EquivalentUpToSampling {
        samples: n + edges.len(),
    }
}

/// Whether the low `bits` bits of `e` depend only on the low `bits` bits
/// of its inputs, with all constants fitting in `bits` bits.
pub(crate) fn narrow_sound(e: &Expr, bits: u32) -> Result<(), String> {
    let limit = if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    };
    for n in e.dag_nodes() {
        match n.node() {
            Node::KeyByte(_) => return Err("key-byte extraction is not width-polymorphic".into()),
            Node::Const(c) if *c > limit => {
                return Err(format!("constant {c:#x} exceeds {bits} bits"))
            }
            Node::Binary(BinOp::Divides, ..) => {
                return Err("divisibility check is not width-polymorphic".into())
            }
            Node::Binary(BinOp::Shr, ..) => {
                return Err("right shift is not width-polymorphic".into())
            }
            Node::Binary(BinOp::Shl, _, amt) => match amt.as_const() {
                Some(s) if (s as u32) < bits => {}
                Some(s) => return Err(format!("shift amount {s} is at least {bits}")),
                None => return Err("variable shift amount".into()),
            },
            _ => {}
        }
    }
    Ok(())
}

fn exhaustive_equiv(a: &Expr, b: &Expr, bits: u32) -> Result<EquivVerdict, ExprError> {
    if bits == 0 || bits > 16 {
        return Err(ExprError::NarrowingUnsound(format!(
            "unsupported width {bits}"
        )));
    }
    narrow_sound(a, bits).map_err(ExprError::NarrowingUnsound)?;
    narrow_sound(b, bits).map_err(ExprError::NarrowingUnsound)?;
    let vars: Vec<Var> = a.vars().union(b.vars()).iter().collect();
    if vars.len() as u32 * bits > 24 {
        return Err(ExprError::DomainTooLarge {
            vars: vars.len(),
            bits,
        });
    }
    let mask = (1u64 << bits) - 1;
    let total = 1u64 << (bits * vars.len() as u32);
    let (ca, cb) = (CompiledExpr::new(a), CompiledExpr::new(b));
    let chunk = 4096u64;
    let mut start = 0u64;
    let mut cols = vec![Vec::new(); 4];
    while start < total {
        let m = chunk.min(total - start);
        for c in cols.iter_mut() {
            c.clear();
        }
        for i in start..start + m {
            for (j, v) in vars.iter().enumerate() {
                cols[v.index()].push((i >> (bits * j as u32)) & mask);
            }
        }
        let c = Columns {
            x: &cols[0],
            y: &cols[1],
            c: &cols[2],
            k: &cols[3],
        };
        let mut oa = vec![0; m as usize];
        let mut ob = vec![0; m as usize];
        ca.eval_batch(&c, &mut oa);
        cb.eval_batch(&c, &mut ob);
        if let Some(j) = (0..m as usize).find(|&j| (oa[j] ^ ob[j]) & mask != 0) {
            let mut cex = Assignment::default();
            for v in &vars {
                cex.set(*v, cols[v.index()][j]);
            }
            return Ok(EquivVerdict::Inequivalent {
                counterexample: cex,
            });
        }
        start += m;
    }
    Ok(EquivVerdict::EquivalentExhaustive { bits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;

    fn e(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    #[test]
    fn exhaustive_examples() {
        let s = EquivStrategy::ExhaustiveNarrow { bits: 8 };
        let v = check_equiv(&e("(sub x y)"), &e("(add (add x (not y)) 1)"), &s).unwrap();
        assert_eq!(v, EquivVerdict::EquivalentExhaustive { bits: 8 });
        let v = check_equiv(&e("(xor x y)"), &e("(sub (or x y) (and x y))"), &s).unwrap();
        assert_eq!(v, EquivVerdict::EquivalentExhaustive { bits: 8 });
        let v = check_equiv(&e("(add x y)"), &e("(sub x y)"), &s).unwrap();
        assert_eq!(
            v,
            EquivVerdict::Inequivalent {
                counterexample: Assignment::xy(0, 1)
            }
        );
    }

    #[test]
    fn narrowing_refusals() {
        let s = EquivStrategy::ExhaustiveNarrow { bits: 8 };
        for bad in [
            "(shr x 1)",
            "(shl x 8)",
            "(shl x y)",
            "(add x 256)",
            "(and (keybyte 0) x)",
            "(divides 15 k)",
        ] {
            let r = check_equiv(&e(bad), &e(bad), &s);
            assert!(matches!(r, Err(ExprError::NarrowingUnsound(_))), "{bad}");
        }
        assert!(check_equiv(&e("(shl x 7)"), &e("(shl x 7)"), &s)
            .unwrap()
            .is_equivalent());
    }

    #[test]
    fn sampling_finds_real_counterexamples() {
        let (a, b) = (e("(add x y)"), e("(or x y)"));
        let v = check_equiv(&a, &b, &EquivStrategy::RandomSampling { n: 100, seed: 1 }).unwrap();
        let EquivVerdict::Inequivalent { counterexample } = v else {
            panic!()
        };
        assert_ne!(a.eval(&counterexample), b.eval(&counterexample));
        let v = check_equiv(
            &a,
            &e("(add (xor x y) (mul 2 (and x y)))"),
            &EquivStrategy::RandomSampling { n: 100, seed: 1 },
        )
        .unwrap();
        assert_eq!(v, EquivVerdict::EquivalentUpToSampling { samples: 136 });
    }

    #[test]
    fn smt_export_writes_query() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.smt2");
        let v = check_equiv(
            &e("(add x y)"),
            &e("(sub x y)"),
            &EquivStrategy::SmtExport { path: p.clone() },
        )
        .unwrap();
        assert_eq!(v, EquivVerdict::Unknown { query: p.clone() });
        let q = std::fs::read_to_string(p).unwrap();
        assert!(q.contains("(set-logic QF_BV)") && q.contains("(check-sat)"));
    }
}
