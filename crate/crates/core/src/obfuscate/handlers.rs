//! Handlers: several core semantics merged behind key encodings and
//! rewritten with MBAs.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{CoreSemantics, ObfError, ObfuscationConfig};
use crate::expr::{Assignment, BinOp, Columns, CompiledExpr, Expr, UnOp, Var, EDGE_CASES};
use crate::keys::{
    gen_factorization_encoding, synthesize_point_function, EncodingKind, KeyEncoding, KeySet,
};
use crate::rewrite::{RewriteConfig, Rewriter};
use crate::rng::Rng as StdRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slot {
    pub encoding: KeyEncoding,
    pub sem: CoreSemantics,
}

#[derive(Debug, Clone)]
pub struct Handler {
    pub id: usize,
    pub key_set: KeySet,
    pub slots: Vec<Slot>,
    pub merged: Expr,
    compiled: CompiledExpr,
}

impl PartialEq for Handler {
    fn eq(&self, o: &Self) -> bool {
        self.id == o.id
            && self.key_set == o.key_set
            && self.slots == o.slots
            && self.merged == o.merged
    }
}

impl Handler {
    pub fn new(id: usize, key_set: KeySet, slots: Vec<Slot>, merged: Expr) -> Handler {
        let compiled = CompiledExpr::new(&merged);
        Handler {
            id,
            key_set,
            slots,
            merged,
            compiled,
        }
    }

    pub fn compiled(&self) -> &CompiledExpr {
        &self.compiled
    }

    pub fn eval(&self, x: u64, y: u64, c: u64, k: u64) -> u64 {
        self.compiled.eval(&Assignment { x, y, c, k })
    }

    /// Slot index selected by key `k`, if `k` is one of the handler's keys.
    pub fn slot_for_key(&self, k: u64) -> Option<usize> {
        self.key_set.keys.iter().position(|&v| v == k)
    }

    /// Every slot behaves as its semantics under its key on `n` random
    /// inputs plus the edge-case grid.
    pub fn check_slots(&self, n: usize, rng: &mut StdRng) -> Result<(), ObfError> {
        let mut xs: Vec<u64> = Vec::with_capacity(n + 216);
        let mut ys = Vec::with_capacity(n + 216);
        let mut cs = Vec::with_capacity(n + 216);
        for &a in &EDGE_CASES {
            for &b in &EDGE_CASES {
                for &c in &EDGE_CASES {
                    xs.push(a);
                    ys.push(b);
                    cs.push(c);
                }
            }
        }
        for _ in 0..n {
            xs.push(rng.gen());
            ys.push(rng.gen());
            cs.push(rng.gen());
        }
        let mut got = vec![0u64; xs.len()];
        let mut want = vec![0u64; xs.len()];
        for (i, slot) in self.slots.iter().enumerate() {
            let k = [self.key_set.keys[i]];
            self.compiled.eval_batch(
                &Columns {
                    x: &xs,
                    y: &ys,
                    c: &cs,
                    k: &k,
                },
                &mut got,
            );
            CompiledExpr::new(&slot.sem.expr).eval_batch(
                &Columns {
                    x: &xs,
                    y: &ys,
                    c: &cs,
                    k: &[],
                },
                &mut want,
            );
            if let Some(j) = (0..xs.len()).find(|&j| got[j] != want[j]) {
                return Err(ObfError::SlotMismatch {
                    handler: self.id,
                    slot: i,
                    input: (xs[j], ys[j], cs[j]),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandlerSet {
    pub handlers: Vec<Handler>,
    pub exit_handler_id: usize,
}

impl HandlerSet {
    pub fn new(handlers: Vec<Handler>) -> HandlerSet {
        let exit_handler_id = handlers.len();
        HandlerSet {
            handlers,
            exit_handler_id,
        }
    }

    pub fn get(&self, id: usize) -> Option<&Handler> {
        self.handlers.get(id)
    }

    /// All (handler, slot) pairs whose semantics canonicalize to `canon`.
    pub fn slots_for(&self, canon: &str) -> Vec<(usize, usize)> {
        match crate::expr::parse_expr(canon) {
            Ok(e) => self.slots_for_normalized(&e),
            Err(_) => vec![],
        }
    }

    /// All (handler, slot) pairs whose normalized semantics equal `n`.
    pub fn slots_for_normalized(&self, n: &Expr) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for h in &self.handlers {
            for (i, s) in h.slots.iter().enumerate() {
                if s.sem.normalized() == n {
                    out.push((h.id, i));
                }
            }
        }
        out
    }
}

/// `Σ enc_i(k) · sem_i`, left-associated.
pub fn merge_slots(slots: &[Slot]) -> Expr {
    let terms = slots
        .iter()
        .map(|s| s.encoding.expr.clone() * s.sem.expr.clone());
    terms.reduce(|a, b| a + b).expect("at least one slot")
}

const MAX_DECOY_SIZE: usize = 64;

const DECOY_BIN: [BinOp; 6] = [
    BinOp::Add,
    BinOp::Sub,
    BinOp::Mul,
    BinOp::And,
    BinOp::Or,
    BinOp::Xor,
];

/// Random expression over `x`, `y`, `c` with exactly `size` nodes.
pub fn random_semantics(size: usize, rng: &mut StdRng) -> Expr {
    if size <= 1 {
        return Expr::var([Var::X, Var::Y, Var::C][rng.gen_range(0..3)]);
    }
    if size == 2 || rng.gen_bool(0.15) {
        let op = if rng.gen_bool(0.5) {
            UnOp::Not
        } else {
            UnOp::Neg
        };
        return Expr::unary(op, random_semantics(size - 1, rng));
    }
    let l = rng.gen_range(1..size - 1);
    let op = DECOY_BIN[rng.gen_range(0..DECOY_BIN.len())];
    Expr::binary(
        op,
        random_semantics(l, rng),
        random_semantics(size - 1 - l, rng),
    )
}

fn fresh_key(keys: &[u64], rng: &mut StdRng) -> u64 {
    loop {
        let k: u64 = rng.gen();
        if k > 1 && !keys.contains(&k) {
            return k;
        }
    }
}

/// Keys and encodings for `n` slots, kinds chosen uniformly.
fn gen_encodings(
    n: usize,
    cfg: &ObfuscationConfig,
    rng: &mut StdRng,
) -> Result<(Vec<u64>, Vec<KeyEncoding>), ObfError> {
    for _ in 0..16 {
        let mut keys = Vec::with_capacity(n);
        for _ in 0..n {
            let k = fresh_key(&keys, rng);
            keys.push(k);
        }
        let kinds: Vec<EncodingKind> = (0..n)
            .map(|_| match cfg.key_kind {
                Some(kind) => kind,
                None if rng.gen_bool(0.5) => EncodingKind::Factorization,
                None => EncodingKind::PointFunction,
            })
            .collect();
        let mut encs: Vec<Option<KeyEncoding>> = vec![None; n];
        for i in (0..n).filter(|&i| kinds[i] == EncodingKind::Factorization) {
            encs[i] = Some(gen_factorization_encoding(
                &mut keys,
                i,
                cfg.prime_bits,
                rng,
            )?);
        }
        for i in (0..n).filter(|&i| kinds[i] == EncodingKind::PointFunction) {
            encs[i] = Some(synthesize_point_function(&keys, i, cfg.pf_max_ops, cfg.pf_cap, rng)?.0);
        }
        let encs: Vec<KeyEncoding> = encs.into_iter().map(Option::unwrap).collect();
        if encs.iter().all(|e| e.selects(&keys)) {
            return Ok((keys, encs));
        }
    }
    Err(ObfError::InvalidConfig(
        "could not generate consistent key encodings".into(),
    ))
}

/// Build one handler over the given semantics (any count ≥ 1; the
/// pipeline uses 3 to 5).
pub fn build_handler(
    id: usize,
    sems: Vec<CoreSemantics>,
    rewriter: Option<&Rewriter>,
    cfg: &ObfuscationConfig,
    rng: &mut StdRng,
) -> Result<Handler, ObfError> {
    let (keys, encs) = gen_encodings(sems.len(), cfg, rng)?;
    let slots: Vec<Slot> = encs
        .into_iter()
        .zip(sems)
        .map(|(encoding, sem)| Slot { encoding, sem })
        .collect();
    let mut merged = merge_slots(&slots);
    if let (Some(rw), Some(rc)) = (rewriter, &cfg.rewrite) {
        let rc = RewriteConfig {
            seed: rng.gen(),
            ..rc.clone()
        };
        merged = rw.rewrite(&merged, &rc)?;
    }
    let h = Handler::new(id, KeySet { keys }, slots, merged);
    h.check_slots(1000, rng)?;
    Ok(h)
}

/// Handler set covering every distinct semantics in `sems` at least once.
/// Remaining slots hold either decoys or extra copies of required
/// semantics under other keys.
pub fn build_handlers(
    sems: &[CoreSemantics],
    rewriter: Option<&Rewriter>,
    cfg: &ObfuscationConfig,
    rng: &mut StdRng,
) -> Result<HandlerSet, ObfError> {
    let (lo, hi) = cfg.slots_per_handler;
    if lo == 0 || lo > hi {
        return Err(ObfError::InvalidConfig(format!(
            "slots per handler {lo}..={hi}"
        )));
    }
    let mut seen = HashSet::new();
    let required: Vec<&CoreSemantics> =
        sems.iter().filter(|s| seen.insert(s.canonical())).collect();
    // Decoys mimic the DAG size of real semantics; tree sizes of deep
    // superoperators are exponential.
    let depths: Vec<usize> = if sems.is_empty() {
        vec![3]
    } else {
        sems.iter()
            .map(|s| s.expr.dag_nodes().len().min(MAX_DECOY_SIZE))
            .collect()
    };

    let mut counts: Vec<usize> = (0..cfg.handler_count)
        .map(|_| rng.gen_range(lo..=hi))
        .collect();
    while counts.iter().sum::<usize>() < required.len() {
        counts.push(hi);
    }
    let mut positions: Vec<(usize, usize)> = counts
        .iter()
        .enumerate()
        .flat_map(|(h, &n)| (0..n).map(move |s| (h, s)))
        .collect();
    positions.shuffle(rng);
    let mut table: Vec<Vec<Option<CoreSemantics>>> =
        counts.iter().map(|&n| vec![None; n]).collect();
    for (sem, &(h, s)) in required.iter().zip(&positions) {
        table[h][s] = Some((*sem).clone());
    }
    for &(h, s) in &positions[required.len().min(positions.len())..] {
        let pick = if !required.is_empty() && rng.gen_bool(0.5) {
            let cand = required[rng.gen_range(0..required.len())];
            let canon = cand.canonical();
            (!table[h].iter().flatten().any(|t| t.canonical() == canon)).then(|| cand.clone())
        } else {
            None
        };
        table[h][s] = Some(pick.unwrap_or_else(|| {
            let size = depths[rng.gen_range(0..depths.len())];
            CoreSemantics::new(random_semantics(size, rng))
        }));
    }
    let mut handlers = Vec::with_capacity(table.len());
    for (id, row) in table.into_iter().enumerate() {
        let sems = row.into_iter().map(Option::unwrap).collect();
        handlers.push(build_handler(id, sems, rewriter, cfg, rng)?);
    }
    Ok(HandlerSet::new(handlers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::normalize;
    use crate::rng::rng;

    fn cfg() -> ObfuscationConfig {
        ObfuscationConfig {
            rewrite: None,
            handler_count: 4,
            ..Default::default()
        }
    }

    #[test]
    fn toy_two_slot_handler() {
        let (x, y) = (Expr::x(), Expr::y());
        let sems = vec![
            CoreSemantics::new(x.clone() + y.clone()),
            CoreSemantics::new(x.clone() - y.clone()),
        ];
        let h = build_handler(0, sems, None, &cfg(), &mut rng(3)).unwrap();
        let e0 = h.slots[0].encoding.expr.clone();
        let e1 = h.slots[1].encoding.expr.clone();
        assert_eq!(h.merged, e0 * (x.clone() + y.clone()) + e1 * (x - y));
        let (k0, k1) = (h.key_set.keys[0], h.key_set.keys[1]);
        assert_eq!(h.eval(2, 6, 0, k0), 8);
        assert_eq!(h.eval(2, 6, 0, k1), 2u64.wrapping_sub(6));
    }

    #[test]
    fn decoy_only_set_satisfies_slots() {
        let hs = build_handlers(&[], None, &cfg(), &mut rng(4)).unwrap();
        assert_eq!(hs.handlers.len(), 4);
        assert_eq!(hs.exit_handler_id, 4);
        for h in &hs.handlers {
            assert!((3..=5).contains(&h.slots.len()));
            h.check_slots(100, &mut rng(0)).unwrap();
        }
    }

    #[test]
    fn required_semantics_are_covered() {
        let sems: Vec<CoreSemantics> = (0..30)
            .map(|i| CoreSemantics::new(random_semantics(3 + i % 7, &mut rng(i as u64))))
            .collect();
        let hs = build_handlers(&sems, None, &cfg(), &mut rng(5)).unwrap();
        assert!(hs.handlers.len() >= 6);
        for s in &sems {
            assert!(!hs.slots_for(&s.canonical()).is_empty());
        }
    }

    #[test]
    fn key_selects_only_its_slot() {
        let sems: Vec<CoreSemantics> = [
            Expr::x() + Expr::y(),
            Expr::x() - Expr::y(),
            Expr::x() ^ Expr::c(),
        ]
        .into_iter()
        .map(CoreSemantics::new)
        .collect();
        let hs = build_handlers(&sems, None, &cfg(), &mut rng(6)).unwrap();
        for h in &hs.handlers {
            for (i, &k) in h.key_set.keys.iter().enumerate() {
                let sel = normalize(&h.merged.with_key(k));
                for (j, s) in h.slots.iter().enumerate() {
                    let same = normalize(&s.sem.expr) == sel;
                    assert!(i == j || !same || h.slots[i].sem.canonical() == s.sem.canonical());
                }
            }
        }
    }

    #[test]
    fn random_semantics_has_requested_size() {
        let mut r = rng(1);
        for size in 1..30 {
            let e = random_semantics(size, &mut r);
            assert_eq!(e.size() as usize, size);
            assert!(e.vars().iter().all(|v| v != Var::K));
        }
    }
}
