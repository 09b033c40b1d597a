use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vmobf::attacks::{run_attack, write_jsonl, AttackKind, AttackReport, AttackTarget, RuleSet};
use vmobf::bench::{run_suite, verify, verify_inputs, write_csv, Suite};
use vmobf::ir::{parse_tac, TacProgram};
use vmobf::obfuscate::{obfuscate, HandlerSet, ObfuscationConfig};
use vmobf::rewrite::{RewriteConfig, Rewriter};
use vmobf::rng::derive;
use vmobf::synth::{load_db, store_db, synthesize_classes, SynthConfig, SynthError};
use vmobf::vm::{run_traced, BytecodeProgram};

#[derive(Parser)]
#[command(name = "vmobf", version, about = "VM obfuscation workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the MBA equivalence-class database.
    SynthDb {
        #[arg(long, default_value_t = 7)]
        depth: usize,
        #[arg(long, default_value_t = 1000)]
        vectors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Cap on enumerated expressions.
        #[arg(long, default_value_t = 5_000_000)]
        max_expressions: usize,
    },
    /// Obfuscate a three-address-code program into bytecode plus a handler sidecar.
    Obfuscate {
        program: PathBuf,
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_mba: bool,
        #[arg(long)]
        no_superops: bool,
        /// MBA rewrite bounds `min,max`.
        #[arg(long, value_parser = parse_pair)]
        bounds: Option<(usize, usize)>,
        /// Handler sidecar path (default: `<out>.json`).
        #[arg(long)]
        handlers: Option<PathBuf>,
    },
    /// Fuzz obfuscated bytecode against the original program.
    Verify {
        program: PathBuf,
        bytecode: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        inputs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check only this comma-separated input.
        #[arg(long, value_delimiter = ',', value_parser = parse_u64)]
        input: Option<Vec<u64>>,
        #[arg(long)]
        handlers: Option<PathBuf>,
    },
    /// Run attacks against every handler instance of a bytecode program.
    Attack {
        bytecode: PathBuf,
        #[arg(long)]
        handlers: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Dynamic)]
        mode: ModeArg,
        #[arg(long, value_delimiter = ',', default_value = "taint,slice,symex")]
        attacks: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a benchmark suite and emit one CSV row per criterion.
    Bench {
        suite: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Static,
    Dynamic,
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let s = s.trim();
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| format!("{s}: {e}"))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected `min,max`")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if a > b {
        return Err(format!("{a} > {b}"));
    }
    Ok((a, b))
}

fn sidecar_path(bytecode: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = bytecode.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    })
}

fn load_program(p: &Path) -> Result<TacProgram> {
    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(parse_tac(&text)?)
}

fn load_vm(bytecode: &Path, handlers: Option<PathBuf>) -> Result<(BytecodeProgram, HandlerSet)> {
    let bp = BytecodeProgram::decode(
        &fs::read(bytecode).with_context(|| format!("reading {}", bytecode.display()))?,
    )?;
    let side = sidecar_path(bytecode, handlers);
    let hs = HandlerSet::from_json(
        &fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?,
    )?;
    bp.validate(&hs)?;
    Ok((bp, hs))
}

fn synth_db(
    depth: usize,
    vectors: usize,
    seed: u64,
    out: &Path,
    workers: Option<usize>,
    max_expressions: usize,
) -> Result<ExitCode> {
    let cfg = SynthConfig {
        workers,
        max_expressions,
        ..SynthConfig::new(depth, vectors, seed)
    };
    let db = match synthesize_classes(&cfg) {
        Ok(db) => db,
        Err(e @ SynthError::BudgetExceeded(_)) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
        Err(e) => return Err(e.into()),
    };
    store_db(&db, out)?;
    println!(
        "classes {} nontrivial {} members {}",
        db.classes().len(),
        db.nontrivial_class_count(),
        db.member_count()
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn obfuscate_cmd(
    program: &Path,
    db: Option<PathBuf>,
    seed: u64,
    out: &Path,
    no_mba: bool,
    no_superops: bool,
    bounds: Option<(usize, usize)>,
    handlers: Option<PathBuf>,
) -> Result<ExitCode> {
    let p = load_program(program)?;
    let mut cfg = ObfuscationConfig {
        seed,
        ..Default::default()
    };
    if no_superops {
        cfg.superop_bounds = (0, 0);
    }
    let rw = if no_mba {
        cfg.rewrite = None;
        None
    } else {
        let path = db.ok_or_else(|| anyhow!("--db is required unless --no-mba is given"))?;
        if let Some((a, b)) = bounds {
            cfg.rewrite = Some(RewriteConfig::with_bounds(a, b, 0));
        }
        Some(Rewriter::new(
            &load_db(&path).with_context(|| format!("loading {}", path.display()))?,
        )?)
    };
    let o = obfuscate(&p, rw.as_ref(), &cfg)?;
    let bytes = o.bytecode.encode();
    fs::write(out, &bytes)?;
    let side = sidecar_path(out, handlers);
    let json = o.handlers.to_json();
    fs::write(&side, &json)?;
    let nodes: usize = o
        .handlers
        .handlers
        .iter()
        .map(|h| h.merged.dag_op_count())
        .sum();
    println!(
        "steps {} handlers {} handler_ops {} bytecode_bytes {} sidecar_bytes {}",
        o.bytecode.steps.len(),
        o.handlers.handlers.len(),
        nodes,
        bytes.len(),
        json.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn verify_cmd(
    program: &Path,
    bytecode: &Path,
    inputs: usize,
    seed: u64,
    input: Option<Vec<u64>>,
    handlers: Option<PathBuf>,
) -> Result<ExitCode> {
    let p = load_program(program)?;
    let (bp, hs) = load_vm(bytecode, handlers)?;
    let report = match input {
        Some(args) => {
            if args.len() != p.params.len() {
                bail!("--input needs {} values", p.params.len());
            }
            let cols: Vec<Vec<u64>> = args.iter().map(|&a| vec![a]).collect();
            verify_inputs(&p, &bp, &hs, &cols)?
        }
        None => verify(&p, &bp, &hs, inputs, seed)?,
    };
    match report.mismatch {
        None => {
            println!("PASS tested {}", report.tested);
            Ok(ExitCode::SUCCESS)
        }
        Some(m) => {
            let args: Vec<String> = m.input.iter().map(|v| format!("{v:#x}")).collect();
            println!(
                "FAIL tested {} input {} expected {:#x} got {:#x}",
                report.tested,
                args.join(","),
                m.expected,
                m.got
            );
            Ok(ExitCode::from(1))
        }
    }
}

fn attack_cmd(
    bytecode: &Path,
    handlers: Option<PathBuf>,
    mode: ModeArg,
    attacks: &[String],
    seed: u64,
    report: Option<PathBuf>,
) -> Result<ExitCode> {
    let mut kinds = Vec::new();
    for a in attacks {
        match a.trim().parse::<AttackKind>() {
            Ok(k) => kinds.push(k),
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(2));
            }
        }
    }
    let (bp, hs) = load_vm(bytecode, handlers)?;
    // Stage 1: handler instances, one per distinct (handler, key) pair.
    let trace = if mode == ModeArg::Dynamic {
        let args: Vec<u64> = (0..bp.param_regs.len())
            .map(|i| derive(seed ^ 0xa5a5, i as u64))
            .collect();
        Some(run_traced(&bp, &hs, &args)?.1)
    } else {
        None
    };
    let mut seen = HashSet::new();
    let mut targets = Vec::new();
    for (i, s) in bp.steps.iter().enumerate() {
        let id = s.handler_id as usize;
        if id == hs.exit_handler_id {
            continue;
        }
        let k = bp.key_pool[s.key_idx as usize];
        if !seen.insert((id, k)) {
            continue;
        }
        let h = &hs.handlers[id];
        let t = match &trace {
            Some(tr) => {
                let st = &tr.steps[i];
                AttackTarget::dynamic(h, st.k, Some((st.x, st.y, st.c)))?
            }
            None => AttackTarget::static_slot(
                h,
                h.slot_for_key(k)
                    .ok_or_else(|| anyhow!("step {i}: key not in handler {id}"))?,
            ),
        };
        targets.push(t);
    }
    // Stage 2.
    let rules = RuleSet::identities();
    let mut reports: Vec<AttackReport> = Vec::new();
    for &kind in &kinds {
        // Mode mismatches (e.g. CEGAR on dynamic targets) skip the attack.
        for (j, t) in targets.iter().enumerate() {
            match run_attack(kind, t, &rules, derive(seed, j as u64)) {
                Ok(r) => reports.push(r),
                Err(e) => {
                    eprintln!("skipping {}: {e}", kind.name());
                    break;
                }
            }
        }
    }
    for &kind in &kinds {
        let rs: Vec<&AttackReport> = reports.iter().filter(|r| r.attack == kind.name()).collect();
        if rs.is_empty() {
            continue;
        }
        let ok = rs.iter().filter(|r| r.success).count();
        let unmarked: Vec<f64> = rs.iter().filter_map(|r| r.unmarked_fraction).collect();
        let mut line = format!("{} targets {} success {}", kind.name(), rs.len(), ok);
        if !unmarked.is_empty() {
            line.push_str(&format!(
                " mean_unmarked {:.4}",
                unmarked.iter().sum::<f64>() / unmarked.len() as f64
            ));
        }
        eprintln!("{line}");
    }
    match report {
        Some(path) => write_jsonl(&reports, fs::File::create(&path)?)?,
        None => write_jsonl(&reports, std::io::stdout().lock())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(suite: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let s = Suite::from_toml(
        &fs::read_to_string(suite).with_context(|| format!("reading {}", suite.display()))?,
    )?;
    let rows = run_suite(&s)?;
    match out {
        Some(path) => write_csv(&rows, fs::File::create(&path)?)?,
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    for r in &rows {
        eprintln!(
            "[{}] {} {}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.criterion,
            r.name,
            r.measured
        );
    }
    Ok(if rows.iter().all(|r| r.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::SynthDb {
            depth,
            vectors,
            seed,
            out,
            workers,
            max_expressions,
        } => synth_db(depth, vectors, seed, &out, workers, max_expressions),
        Cmd::Obfuscate {
            program,
            db,
            seed,
            out,
            no_mba,
            no_superops,
            bounds,
            handlers,
        } => obfuscate_cmd(
            &program,
            db,
            seed,
            &out,
            no_mba,
            no_superops,
            bounds,
            handlers,
        ),
        Cmd::Verify {
            program,
            bytecode,
            inputs,
            seed,
            input,
            handlers,
        } => verify_cmd(&program, &bytecode, inputs, seed, input, handlers),
        Cmd::Attack {
            bytecode,
            handlers,
            mode,
            attacks,
            seed,
            report,
        } => attack_cmd(&bytecode, handlers, mode, &attacks, seed, report),
        Cmd::Bench { suite, out } => bench_cmd(&suite, out),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
