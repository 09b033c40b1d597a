//! Benchmark programs, the fuzz verifier and experiment orchestration.

pub mod experiments;
mod suite;

use rand::Rng;
use thiserror::Error;

pub use suite::{run_suite, write_csv, Row, Suite, CSV_HEADER};

use crate::attacks::AttackError;
use crate::ir::{parse_tac, Operand, TacInstr, TacOp, TacProgram};
use crate::obfuscate::HandlerSet;
use crate::rng::Rng as StdRng;
use crate::vm::{run_batch, verification_inputs, BytecodeProgram, VmError};

pub use crate::expr::EDGE_CASES;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bad suite file: {0}")]
    Suite(String),
    #[error(transparent)]
    Obf(#[from] crate::obfuscate::ObfError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Rewrite(#[from] crate::rewrite::RewriteError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Shipped straight-line benchmark programs: (name, source).
pub const PROGRAMS: [(&str, &str); 3] = [
    ("md5_mix", include_str!("../../programs/md5_mix.tac")),
    ("rc4_step", include_str!("../../programs/rc4_step.tac")),
    ("checksum", include_str!("../../programs/checksum.tac")),
];

pub fn shipped_programs() -> Vec<TacProgram> {
    PROGRAMS
        .iter()
        .map(|(_, src)| parse_tac(src).expect("shipped program parses"))
        .collect()
}

const RANDOM_OPS: [TacOp; 10] = [
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
];

/// Random straight-line program. The left operand favours recent
/// definitions, the right one is a constant, a parameter or another recent
/// value. Shift amounts are constants below 64.
pub fn random_program(instrs: usize, params: usize, rng: &mut StdRng) -> TacProgram {
    let params: Vec<String> = (0..params.max(1)).map(|i| format!("p{i}")).collect();
    let mut names = params.clone();
    let mut body = Vec::with_capacity(instrs);
    for i in 0..instrs.max(1) {
        let pick = |rng: &mut StdRng, names: &[String]| {
            let back = (rng.gen::<f64>().powi(3) * names.len() as f64) as usize;
            Operand::Var(names[names.len() - 1 - back.min(names.len() - 1)].clone())
        };
        let op = RANDOM_OPS[rng.gen_range(0..RANDOM_OPS.len())];
        let dest = format!("t{i}");
        let lhs = pick(rng, &names);
        let ins = match op {
            TacOp::Not | TacOp::Neg => TacInstr::un(&dest, op, lhs),
            TacOp::Shl | TacOp::Shr => {
                TacInstr::bin(&dest, op, lhs, Operand::Const(rng.gen_range(1..64)))
            }
            _ => {
                let rhs = if rng.gen_bool(0.3) {
                    Operand::Const(if rng.gen_bool(0.5) {
                        rng.gen_range(1..256)
                    } else {
                        rng.gen()
                    })
                } else if rng.gen_bool(0.4) {
                    Operand::Var(params[rng.gen_range(0..params.len())].clone())
                } else {
                    pick(rng, &names)
                };
                let rhs = if rhs.as_var().is_some() && rhs == lhs {
                    Operand::Const(rng.gen_range(1..256))
                } else {
                    rhs
                };
                TacInstr::bin(&dest, op, lhs, rhs)
            }
        };
        body.push(ins);
        names.push(dest);
    }
    let ret = names.last().unwrap().clone();
    TacProgram {
        name: "random".into(),
        params,
        body,
        ret,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub input: Vec<u64>,
    pub expected: u64,
    pub got: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyReport {
    pub tested: usize,
    pub mismatch: Option<Mismatch>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

/// Compare the VM against the original program on `random` random inputs
/// plus the edge-case product over all parameters.
pub fn verify(
    p: &TacProgram,
    bp: &BytecodeProgram,
    hs: &HandlerSet,
    random: usize,
    seed: u64,
) -> Result<VerifyReport, VmError> {
    let cols = verification_inputs(p.params.len(), random, seed);
    verify_inputs(p, bp, hs, &cols)
}

pub fn verify_inputs(
    p: &TacProgram,
    bp: &BytecodeProgram,
    hs: &HandlerSet,
    cols: &[Vec<u64>],
) -> Result<VerifyReport, VmError> {
    let got = run_batch(bp, hs, cols)?;
    let reference = p.compile();
    let mut args = vec![0u64; cols.len()];
    for (lane, &g) in got.iter().enumerate() {
        for (a, col) in args.iter_mut().zip(cols) {
            *a = col[lane];
        }
        let want = reference
            .eval(&args)
            .map_err(|e| VmError::Decode(e.to_string()))?;
        if want != g {
            return Ok(VerifyReport {
                tested: lane + 1,
                mismatch: Some(Mismatch {
                    input: args,
                    expected: want,
                    got: g,
                }),
            });
        }
    }
    Ok(VerifyReport {
        tested: got.len(),
        mismatch: None,
    })
}
