//! Declarative benchmark suites: a flat TOML table of knobs, one CSV row per
//! acceptance criterion.

use std::cell::OnceCell;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::experiments::*;
use super::BenchError;
use crate::attacks::{CegarBudget, RuleSet};
use crate::keys::EncodingKind;
use crate::obfuscate::ObfuscationConfig;
use crate::rewrite::Rewriter;
use crate::rng::derive;
use crate::synth::{synthesize_classes, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Suite {
    pub seed: u64,
    /// Criteria to run, 1 to 13.
    pub criteria: Vec<u32>,
    /// 0 uses every core.
    pub workers: usize,
    pub db_depth: usize,
    pub db_vectors: usize,
    pub db_seed: u64,
    /// Enumeration cap for the class database build.
    pub db_max_expressions: usize,
    pub verify_seeds: u64,
    pub verify_inputs: usize,
    pub soundness_samples: usize,
    pub determinism_depth: usize,
    pub determinism_seed: u64,
    pub rewrite_exprs: usize,
    pub handlers: usize,
    pub symex_handlers: usize,
    /// Database rules the symbolic attacker adds to its identities.
    pub symex_db_inverses: usize,
    pub taint_traces: usize,
    pub synth_per_depth: usize,
    pub synth_iterations: usize,
    pub superop_corpus: usize,
    pub depth_programs: usize,
    pub diversity_handlers: usize,
    pub cegar_handlers: usize,
    pub blackbox_handlers: usize,
    pub blackbox_budget: u64,
}

impl Default for Suite {
    fn default() -> Self {
        Suite {
            seed: 1,
            criteria: (1..=13).collect(),
            workers: 0,
            db_depth: 7,
            db_vectors: 1000,
            db_seed: 7,
            db_max_expressions: 5_000_000,
            verify_seeds: 100,
            verify_inputs: 10_000,
            soundness_samples: 10_000,
            determinism_depth: 5,
            determinism_seed: 7,
            rewrite_exprs: 1000,
            handlers: 1000,
            symex_handlers: 1000,
            symex_db_inverses: 0,
            taint_traces: 16,
            synth_per_depth: 200,
            synth_iterations: 5000,
            superop_corpus: 200,
            depth_programs: 300,
            diversity_handlers: 1000,
            cegar_handlers: 200,
            blackbox_handlers: 20,
            blackbox_budget: 1_000_000,
        }
    }
}

impl Suite {
    pub fn from_toml(text: &str) -> Result<Suite, BenchError> {
        let s: Suite = toml::from_str(text).map_err(|e| BenchError::Suite(e.to_string()))?;
        if let Some(c) = s.criteria.iter().find(|c| !(1..=13).contains(*c)) {
            return Err(BenchError::Suite(format!("unknown criterion {c}")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub criterion: u32,
    pub name: &'static str,
    pub pass: bool,
    pub measured: String,
    pub threshold: &'static str,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "criterion,name,pass,measured,threshold,seconds";

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv<W: Write>(rows: &[Row], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.2}",
            r.criterion,
            r.name,
            r.pass,
            quote(&r.measured),
            quote(r.threshold),
            r.seconds
        )?;
    }
    Ok(())
}

const NAMES: [&str; 13] = [
    "correctness",
    "class_soundness",
    "db_determinism",
    "rewriter_growth",
    "point_property",
    "static_symex",
    "dynamic_symex_trend",
    "taint_slice",
    "synthesis_limits",
    "superoperator_effect",
    "superoperator_depths",
    "mba_diversity",
    "cegar",
];

const THRESHOLDS: [&str; 13] = [
    "0 mismatches; >=inputs+36 tested per run; <=600s",
    "0 violations; <=900s",
    "identical bytes",
    "all preserved; mean depth strictly increasing",
    "0 violations",
    "0 successes",
    "b0>=0.95; d3<=0.25; d5<=d3; sweep monotone +-0.03",
    "taint in [0.05,0.30]; 0 core unmarked; slice<=taint per handler",
    "non-increasing; d3>=0.80; d13<=0.10; <=3600s",
    "superops<=0.30; baseline-superops>=0.30",
    ">=80% depth>=5; mode in [7,11]",
    "unique>=0.70; overlap<0.15",
    "fact16>=0.95; blackbox32<=0.05; pointfn>=0.50",
];

/// Monotone non-increasing up to `tol`: no later value exceeds an earlier
/// one by more than `tol`.
fn db_config(s: &Suite) -> SynthConfig {
    SynthConfig {
        max_expressions: s.db_max_expressions,
        ..SynthConfig::new(s.db_depth, s.db_vectors, s.db_seed)
    }
}

pub fn monotone_within(vals: &[f64], tol: f64) -> bool {
    vals.iter()
        .enumerate()
        .all(|(i, a)| vals[i + 1..].iter().all(|b| *b <= a + tol))
}

fn fmt_pairs(v: &[(usize, f64)]) -> String {
    v.iter()
        .map(|(k, r)| format!("{k}:{r:.3}"))
        .collect::<Vec<_>>()
        .join(" ")
}

struct Ctx<'s> {
    suite: &'s Suite,
    rw: OnceCell<Rewriter>,
    corpus: OnceCell<Vec<crate::obfuscate::Handler>>,
}

impl Ctx<'_> {
    fn rw(&self) -> Result<&Rewriter, BenchError> {
        if self.rw.get().is_none() {
            let s = self.suite;
            let db = synthesize_classes(&db_config(s))?;
            let _ = self.rw.set(Rewriter::new(&db)?);
        }
        Ok(self.rw.get().unwrap())
    }

    /// Default-config handlers over depth-3 semantics.
    fn corpus(&self) -> Result<&[crate::obfuscate::Handler], BenchError> {
        if self.corpus.get().is_none() {
            let hs = handler_corpus(
                self.suite.handlers,
                3,
                Some(self.rw()?),
                &ObfuscationConfig::default(),
                derive(self.suite.seed, 100),
            )?;
            let _ = self.corpus.set(hs);
        }
        Ok(self.corpus.get().unwrap())
    }

    fn rules(&self) -> Result<RuleSet, BenchError> {
        Ok(match self.suite.symex_db_inverses {
            0 => RuleSet::identities(),
            n => RuleSet::with_db_inverses(self.rw()?, n),
        })
    }
}

fn criterion(ctx: &Ctx<'_>, c: u32, start: Instant) -> Result<(bool, String), BenchError> {
    let s = ctx.suite;
    let seed = derive(s.seed, c as u64);
    Ok(match c {
        1 => {
            let rw = ctx.rw()?;
            let t = Instant::now();
            let runs = correctness(rw, s.verify_seeds, s.verify_inputs, seed)?;
            let secs = t.elapsed().as_secs_f64();
            let bad = runs.iter().filter(|r| r.mismatch.is_some()).count();
            let min_tested = runs.iter().map(|r| r.tested).min().unwrap_or(0);
            let ok = bad == 0 && min_tested >= s.verify_inputs + 36 && secs <= 600.0;
            (
                ok,
                format!(
                    "runs={} mismatching={bad} min_tested={min_tested} verify_s={secs:.1}",
                    runs.len()
                ),
            )
        }
        2 => {
            let db = synthesize_classes(&db_config(s))?;
            let sd = class_soundness(&db, s.soundness_samples, seed);
            let secs = start.elapsed().as_secs_f64();
            (
                sd.violations.is_empty() && secs <= 900.0,
                format!(
                    "classes={} members={} exhaustive8={} violations={}",
                    sd.classes,
                    sd.members,
                    sd.exhaustive,
                    sd.violations.len()
                ),
            )
        }
        3 => {
            let (a, b) = db_determinism(s.determinism_depth, s.determinism_seed, (1, 4))?;
            (a == b, format!("bytes={} identical={}", a.len(), a == b))
        }
        4 => {
            let g = rewriter_growth(ctx.rw()?, s.rewrite_exprs, &[0, 10, 20, 30], seed);
            let inc = g.mean_depth.windows(2).all(|w| w[1].1 > w[0].1);
            (
                g.not_preserved == 0 && inc,
                format!(
                    "not_preserved={} depths={}",
                    g.not_preserved,
                    fmt_pairs(&g.mean_depth)
                ),
            )
        }
        5 => {
            let (pairs, bad) = point_property(ctx.corpus()?);
            (bad == 0, format!("pairs={pairs} violations={bad}"))
        }
        6 => {
            let hs = ctx.corpus()?;
            let ok = static_symex(hs, &ctx.rules()?, seed);
            (ok == 0, format!("handlers={} successes={ok}", hs.len()))
        }
        7 => {
            let sweep: Vec<usize> = (0..=55).step_by(5).collect();
            let t = symex_trend(ctx.rw()?, s.symex_handlers, &sweep, &ctx.rules()?, seed)?;
            let rates: Vec<f64> = t.sweep.iter().map(|x| x.1).collect();
            let ok = t.bound0 >= 0.95
                && t.depth3 <= 0.25
                && t.depth5 <= t.depth3
                && monotone_within(&rates, 0.03);
            (
                ok,
                format!(
                    "b0={:.3} d3={:.3} d5={:.3} sweep={}",
                    t.bound0,
                    t.depth3,
                    t.depth5,
                    fmt_pairs(&t.sweep)
                ),
            )
        }
        8 => {
            let ts = taint_slice(ctx.corpus()?, s.taint_traces, seed);
            let ok = (0.05..=0.30).contains(&ts.taint_unmarked)
                && ts.core_unmarked == 0
                && ts.order_violations == 0;
            (
                ok,
                format!(
                    "taint={:.4} slice={:.4} taint_range=[{:.3},{:.3}] core_unmarked={} order_violations={}",
                    ts.taint_unmarked, ts.slice_unmarked, ts.taint_min, ts.taint_max, ts.core_unmarked, ts.order_violations
                ),
            )
        }
        9 => {
            let curve = synthesis_curve(
                &[3, 5, 7, 9, 11, 13],
                s.synth_per_depth,
                s.synth_iterations,
                seed,
            );
            let rates: Vec<f64> = curve.iter().map(|x| x.1).collect();
            let secs = start.elapsed().as_secs_f64();
            let ok = monotone_within(&rates, 0.0)
                && rates[0] >= 0.8
                && rates[5] <= 0.10
                && secs <= 3600.0;
            (ok, fmt_pairs(&curve))
        }
        10 => {
            let (sup, base) = superop_corpora(s.superop_corpus, (3, 12), seed)?;
            let a = synthesis_rate(&sup, s.synth_iterations, derive(seed, 1));
            let b = synthesis_rate(&base, s.synth_iterations, derive(seed, 2));
            (
                a <= 0.30 && b - a >= 0.30,
                format!("superops={a:.3} baseline={b:.3}"),
            )
        }
        11 => {
            let sems = superop_semantics((3, 12), s.depth_programs, seed)?;
            let h = depth_histogram(&sems);
            let deep = h.range(5..).map(|x| x.1).sum::<usize>() as f64 / sems.len().max(1) as f64;
            let mode = h
                .iter()
                .max_by_key(|(d, n)| (**n, std::cmp::Reverse(**d)))
                .map_or(0, |x| *x.0);
            (
                deep >= 0.8 && (7..=11).contains(&mode),
                format!("semantics={} depth>=5={deep:.3} mode={mode}", sems.len()),
            )
        }
        12 => {
            let d = diversity(ctx.rw()?, s.diversity_handlers, seed)?;
            let overlap = d.overlap_fraction.unwrap_or(1.0);
            (
                d.unique_fraction >= 0.7 && overlap < 0.15,
                format!("unique={:.3} overlap={overlap:.3}", d.unique_fraction),
            )
        }
        13 => {
            let rw = ctx.rw()?;
            let f = cegar_rate(
                rw,
                s.cegar_handlers,
                EncodingKind::Factorization,
                16,
                &CegarBudget::default(),
                derive(seed, 1),
            )?;
            let bb = cegar_rate(
                rw,
                s.blackbox_handlers,
                EncodingKind::Factorization,
                32,
                &CegarBudget::black_box(s.blackbox_budget),
                derive(seed, 2),
            )?;
            let pf = cegar_rate(
                rw,
                s.cegar_handlers,
                EncodingKind::PointFunction,
                16,
                &CegarBudget::default(),
                derive(seed, 3),
            )?;
            let ok = f.rate() >= 0.95 && bb.rate() <= 0.05 && pf.rate() >= 0.5;
            (
                ok,
                format!(
                    "fact16={:.3} blackbox32={:.3} pointfn={:.3} pointfn_mean_spent={:.0}",
                    f.rate(),
                    bb.rate(),
                    pf.rate(),
                    pf.mean_spent
                ),
            )
        }
        _ => return Err(BenchError::Suite(format!("unknown criterion {c}"))),
    })
}

/// Run the selected criteria. An experiment error fails its row only.
pub fn run_suite(suite: &Suite) -> Result<Vec<Row>, BenchError> {
    let run = || {
        let ctx = Ctx {
            suite,
            rw: OnceCell::new(),
            corpus: OnceCell::new(),
        };
        suite
            .criteria
            .iter()
            .map(|&c| {
                let start = Instant::now();
                let (pass, measured) =
                    criterion(&ctx, c, start).unwrap_or_else(|e| (false, format!("error: {e}")));
                let i = c as usize - 1;
                Row {
                    criterion: c,
                    name: NAMES[i],
                    pass,
                    measured,
                    threshold: THRESHOLDS[i],
                    seconds: start.elapsed().as_secs_f64(),
                }
            })
            .collect()
    };
    if suite.workers == 0 {
        Ok(run())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(suite.workers)
            .build()
            .map_err(|e| BenchError::Suite(e.to_string()))?;
        Ok(pool.install(run))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_suite_parses_with_defaults() {
        let s = Suite::from_toml("seed = 3\ncriteria = [3, 5]\nhandlers = 10\n").unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.criteria, vec![3, 5]);
        assert_eq!(s.db_depth, 7);
        assert!(Suite::from_toml("nonsense = 1").is_err());
        assert!(Suite::from_toml("criteria = [14]").is_err());
    }

    #[test]
    fn monotone_tolerance() {
        assert!(monotone_within(&[1.0, 0.6, 0.62, 0.5], 0.03));
        assert!(!monotone_within(&[1.0, 0.6, 0.64], 0.03));
        assert!(!monotone_within(&[0.5, 0.6], 0.0));
    }

    #[test]
    fn csv_quotes_fields() {
        let r = Row {
            criterion: 1,
            name: "x",
            pass: true,
            measured: "a,b".into(),
            threshold: "t",
            seconds: 1.0,
        };
        let mut out = Vec::new();
        write_csv(&[r], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            format!("{CSV_HEADER}\n1,x,true,\"a,b\",t,1.00\n")
        );
    }
}
