use std::collections::HashMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::Rng;

use vmobf::attacks::{
    confirms, lower, slice_code, symex_simplify, taint_code, AttackTarget, Granularity, RuleSet,
    SymexBudget, REG_C, REG_K, REG_X, REG_Y,
};
use vmobf::expr::{
    check_equiv, normalize, parse_dag, parse_expr, Assignment, BinOp, CompiledExpr, EquivStrategy,
    EquivVerdict, Expr, UnOp, Var,
};
use vmobf::ir::{eval_tac, parse_tac, to_ssa, Operand, TacInstr, TacOp, TacProgram};
use vmobf::keys::{gen_factorization_encoding, synthesize_point_function};
use vmobf::obfuscate::{
    build_handler, obfuscate, random_semantics, CoreSemantics, ObfuscationConfig,
};
use vmobf::rewrite::{instantiate, RewriteConfig, Rewriter};
use vmobf::rng::rng;
use vmobf::synth::{synthesize_classes, SynthConfig};
use vmobf::vm::{run, run_batch, BytecodeProgram};

fn rewriter() -> &'static Rewriter {
    static RW: OnceLock<Rewriter> = OnceLock::new();
    RW.get_or_init(|| {
        Rewriter::new(&synthesize_classes(&SynthConfig::new(5, 1000, 7)).unwrap()).unwrap()
    })
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        prop::sample::select(Var::ALL.to_vec()).prop_map(Expr::var),
        prop_oneof![Just(0u64), Just(1), Just(u64::MAX), any::<u64>(), 0u64..64]
            .prop_map(Expr::constant),
    ];
    leaf.prop_recursive(5, 48, 2, |inner| {
        prop_oneof![
            (prop::sample::select(UnOp::ALL.to_vec()), inner.clone())
                .prop_map(|(op, a)| Expr::unary(op, a)),
            (
                prop::sample::select(BinOp::ALL.to_vec()),
                inner.clone(),
                inner
            )
                .prop_map(|(op, a, b)| Expr::binary(op, a, b)),
        ]
    })
}

fn assignments(n: usize, seed: u64) -> Vec<Assignment> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Assignment::new(r.gen(), r.gen(), r.gen(), r.gen()))
        .collect()
}

fn agrees(a: &Expr, b: &Expr, n: usize, seed: u64) -> bool {
    let (ca, cb) = (CompiledExpr::new(a), CompiledExpr::new(b));
    assignments(n, seed)
        .iter()
        .all(|v| ca.eval(v) == cb.eval(v))
}

/// Straight-line programs with reassignments and copies.
fn arb_program() -> impl Strategy<Value = TacProgram> {
    let ops = prop::sample::select(vec![
        TacOp::Add,
        TacOp::Sub,
        TacOp::Mul,
        TacOp::And,
        TacOp::Or,
        TacOp::Xor,
        TacOp::Shl,
        TacOp::Shr,
        TacOp::Not,
        TacOp::Neg,
        TacOp::Mov,
    ]);
    let instr = (
        ops,
        0usize..6,
        any::<u64>(),
        any::<u64>(),
        any::<bool>(),
        0u64..64,
    );
    (1usize..4, prop::collection::vec(instr, 1..24)).prop_map(|(params, raw)| {
        let params: Vec<String> = (0..params).map(|i| format!("a{i}")).collect();
        let mut names = params.clone();
        let mut body = Vec::new();
        for (op, dest, l, r, r_const, shamt) in raw {
            let pick = |v: u64| Operand::Var(names[(v as usize) % names.len()].clone());
            let dest = format!("v{dest}");
            let lhs = pick(l);
            let ins = match op.arity() {
                1 if op == TacOp::Mov && r_const => TacInstr::un(&dest, op, Operand::Const(r)),
                1 => TacInstr::un(&dest, op, lhs),
                _ if matches!(op, TacOp::Shl | TacOp::Shr) => {
                    TacInstr::bin(&dest, op, lhs, Operand::Const(shamt))
                }
                _ if r_const => TacInstr::bin(&dest, op, lhs, Operand::Const(r)),
                _ => TacInstr::bin(&dest, op, lhs, pick(r >> 3)),
            };
            body.push(ins);
            if !names.contains(&dest) {
                names.push(dest);
            }
        }
        let ret = body.last().unwrap().dest.clone();
        TacProgram {
            name: "p".into(),
            params,
            body,
            ret,
        }
    })
}

/// Rename parameters and definitions in order of appearance.
fn alpha(p: &TacProgram) -> TacProgram {
    let mut map: HashMap<String, String> = HashMap::new();
    for (i, a) in p.params.iter().enumerate() {
        map.insert(a.clone(), format!("p{i}"));
    }
    let ren = |o: &Operand, map: &HashMap<String, String>| match o {
        Operand::Var(v) => Operand::Var(map[v].clone()),
        c => c.clone(),
    };
    let mut body = Vec::new();
    for (i, ins) in p.body.iter().enumerate() {
        let ops: Vec<Operand> = ins.operands().map(|o| ren(o, &map)).collect();
        map.insert(ins.dest.clone(), format!("d{i}"));
        let d = map[&ins.dest].clone();
        body.push(match ops.len() {
            1 => TacInstr::un(&d, ins.op, ops[0].clone()),
            _ => TacInstr::bin(&d, ins.op, ops[0].clone(), ops[1].clone()),
        });
    }
    TacProgram {
        name: p.name.clone(),
        params: map_params(p, &map),
        body,
        ret: map[&p.ret].clone(),
    }
}

fn map_params(p: &TacProgram, map: &HashMap<String, String>) -> Vec<String> {
    p.params.iter().map(|a| map[a].clone()).collect()
}

proptest! {
    #[test]
    fn normalize_preserves_and_shrinks(e in arb_expr()) {
        let n = normalize(&e);
        prop_assert!(agrees(&e, &n, 1000, 1));
        prop_assert_eq!(normalize(&n), n.clone());
        prop_assert!(n.syntactic_depth() <= e.syntactic_depth());
    }

    #[test]
    fn equiv_is_reflexive_and_counterexamples_are_real(a in arb_expr(), b in arb_expr()) {
        let v = check_equiv(&a, &a, &EquivStrategy::RandomSampling { n: 200, seed: 3 }).unwrap();
        prop_assert!(!v.is_inequivalent());
        if let Ok(v) = check_equiv(&a, &a, &EquivStrategy::ExhaustiveNarrow { bits: 4 }) {
            prop_assert!(!v.is_inequivalent());
        }
        for s in [EquivStrategy::RandomSampling { n: 200, seed: 4 }, EquivStrategy::ExhaustiveNarrow { bits: 4 }] {
            if let Ok(EquivVerdict::Inequivalent { counterexample: cex }) = check_equiv(&a, &b, &s) {
                let narrow = matches!(s, EquivStrategy::ExhaustiveNarrow { .. });
                let (va, vb) = (a.eval(&cex), b.eval(&cex));
                let differs = if narrow { (va ^ vb) & 0xf != 0 } else { va != vb };
                prop_assert!(differs);
            }
        }
    }

    #[test]
    fn expression_text_round_trips(e in arb_expr()) {
        prop_assert_eq!(parse_expr(&e.to_string()).unwrap(), e.clone());
        prop_assert_eq!(parse_dag(&e.to_dag_text()).unwrap(), e);
    }

    #[test]
    fn tac_render_round_trips(p in arb_program()) {
        prop_assert_eq!(parse_tac(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn ssa_preserves_semantics_and_is_idempotent(p in arb_program(), seed in any::<u64>()) {
        let s = to_ssa(&p).to_tac();
        let mut r = rng(seed);
        for _ in 0..1000 {
            let args: Vec<u64> = p.params.iter().map(|_| r.gen()).collect();
            prop_assert_eq!(eval_tac(&p, &args).unwrap(), eval_tac(&s, &args).unwrap());
        }
        prop_assert_eq!(alpha(&to_ssa(&s).to_tac()), alpha(&s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rewriting_preserves_grows_and_is_deterministic(size in 3usize..9, seed in any::<u64>()) {
        let e = random_semantics(size, &mut rng(seed));
        let cfg = RewriteConfig::with_bounds(5, 15, seed);
        let out = rewriter().rewrite(&e, &cfg).unwrap();
        let v = check_equiv(&out, &e, &EquivStrategy::RandomSampling { n: 1000, seed }).unwrap();
        prop_assert!(v.is_equivalent());
        prop_assert!(normalize(&out).syntactic_depth() >= normalize(&e).syntactic_depth());
        prop_assert_eq!(rewriter().rewrite(&e, &cfg).unwrap(), out);
    }

    #[test]
    fn instantiated_members_match_their_node(a in arb_expr(), b in arb_expr(), pick in any::<prop::sample::Index>()) {
        let rw = rewriter();
        for op in [BinOp::Add, BinOp::Sub, BinOp::Xor, BinOp::And, BinOp::Or, BinOp::Mul] {
            let pattern = Expr::binary(op, Expr::x(), Expr::y());
            let Some(members) = rw.members_for(&pattern) else { continue };
            let m = &members[pick.index(members.len())];
            let node = Expr::binary(op, a.clone(), b.clone());
            prop_assert!(agrees(&instantiate(m, &node), &node, 300, 9), "{} on {}", m, node);
        }
    }

    #[test]
    fn encodings_are_point_functions(n in 3usize..=5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut keys: Vec<u64> = Vec::new();
        while keys.len() < n {
            let k: u64 = r.gen();
            if k > 1 && !keys.contains(&k) {
                keys.push(k);
            }
        }
        let f = gen_factorization_encoding(&mut keys, 0, 16, &mut r).unwrap();
        let (pf, _) = synthesize_point_function(&keys, 1, 15, 1_000_000, &mut r).unwrap();
        for (enc, i) in [(&f, 0), (&pf, 1)] {
            for (j, &k) in keys.iter().enumerate() {
                prop_assert_eq!(enc.eval(k), (i == j) as u64);
            }
            prop_assert!(!enc.expr.vars().contains(Var::X) && !enc.expr.vars().contains(Var::Y) && !enc.expr.vars().contains(Var::C));
        }
        // Factorization: 1 exactly on the non-trivial divisors of n.
        let n_ = f.factors.unwrap().n;
        for _ in 0..10_000 {
            let k: u64 = r.gen_range(0..1 << 20);
            let brute = (k > 1 && k != n_ && n_.is_multiple_of(k)) as u64;
            prop_assert_eq!(f.eval(k), brute);
        }
        let fs = f.factors.unwrap();
        prop_assert_eq!(f.eval(fs.q), 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn vm_matches_reference(p in arb_program(), seed in any::<u64>(), mba in any::<bool>()) {
        let cfg = ObfuscationConfig {
            seed,
            handler_count: 8,
            rewrite: mba.then(|| RewriteConfig::with_bounds(2, 6, 0)),
            ..Default::default()
        };
        let o = obfuscate(&p, Some(rewriter()), &cfg).unwrap();
        let bytes = o.bytecode.encode();
        let bp = BytecodeProgram::decode(&bytes).unwrap();
        prop_assert_eq!(&bp, &o.bytecode);
        prop_assert_eq!(bp.encode(), bytes);
        let mut r = rng(seed ^ 1);
        let cols: Vec<Vec<u64>> = p.params.iter().map(|_| (0..200).map(|_| r.gen()).collect()).collect();
        let batch = run_batch(&bp, &o.handlers, &cols).unwrap();
        for lane in 0..200 {
            let args: Vec<u64> = cols.iter().map(|c| c[lane]).collect();
            let want = eval_tac(&p, &args).unwrap();
            prop_assert_eq!(run(&bp, &o.handlers, &args).unwrap(), want);
            prop_assert_eq!(batch[lane], want);
        }
    }

    #[test]
    fn keys_isolate_slots_and_attacks_score_soundly(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(3..=5);
        let sems: Vec<CoreSemantics> = (0..n).map(|_| CoreSemantics::new(random_semantics(r.gen_range(3..6), &mut r))).collect();
        let h = build_handler(0, sems, Some(rewriter()), &ObfuscationConfig::default(), &mut r).unwrap();
        for (i, &k) in h.key_set.keys.iter().enumerate() {
            let under = h.merged.with_key(k);
            for (j, s) in h.slots.iter().enumerate() {
                let same = agrees(&s.sem.expr, &h.slots[i].sem.expr, 200, 5);
                prop_assert_eq!(agrees(&under, &s.sem.expr, 200, 6), i == j || same);
            }
            let t = AttackTarget::dynamic(&h, k, None).unwrap();
            let rep = symex_simplify(&t, &RuleSet::identities(), &SymexBudget::default(), seed);
            if rep.success {
                prop_assert!(confirms(&parse_expr(rep.output.as_deref().unwrap()).unwrap(), &t.ground_truth));
            }
        }
        prop_assert!(!symex_simplify(&AttackTarget::static_slot(&h, 0), &RuleSet::identities(), &SymexBudget::default(), seed).success);
        // Taint never misses an input-dependent computation that reaches the store.
        let code = lower(&h.merged);
        let marks = taint_code(&code, &[REG_X, REG_Y, REG_C, REG_K], &[], Granularity::Bit);
        let live = slice_code(&code);
        let traces: Vec<Vec<Option<u64>>> = (0..16).map(|_| code.trace(r.gen(), r.gen(), r.gen(), r.gen())).collect();
        for j in 0..code.instrs.len() {
            let varies = traces.iter().any(|t| t[j] != traces[0][j]);
            prop_assert!(!(code.instrs[j].is_compute() && live[j] && varies && !marks[j]), "{}", code.instrs[j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn seeds_give_distinct_handlers(p in arb_program(), seed in any::<u64>()) {
        let cfg = |s| ObfuscationConfig { seed: s, handler_count: 16, ..Default::default() };
        let a = obfuscate(&p, Some(rewriter()), &cfg(seed)).unwrap();
        let b = obfuscate(&p, Some(rewriter()), &cfg(seed ^ 0x9e37)).unwrap();
        let bs: std::collections::HashSet<&Expr> = b.handlers.handlers.iter().map(|h| &h.merged).collect();
        let shared = a.handlers.handlers.iter().filter(|h| bs.contains(&h.merged)).count();
        prop_assert!((shared as f64) < 0.3 * a.handlers.handlers.len() as f64);
    }
}
