//! Automated deobfuscation attacks, used as measurement plugins against
//! handlers. Each attack runs in a static mode (`k` symbolic) or a dynamic
//! mode (`k` and operands observed from a trace).

mod cegar;
mod diversity;
mod lower;
mod mcts;
mod slice;
mod symex;
mod taint;

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cegar::{cegar_key_recovery, cegar_on_expr, CegarBudget, CegarOutcome};
pub use diversity::{mba_diversity, Diversity};
pub use lower::{
    lower, LInstr, LinearCode, Reg, Src, FIRST_TEMP, REG_C, REG_IP, REG_K, REG_X, REG_Y,
};
pub use mcts::{synthesize_oracle, synthesize_semantics, SynthBudget, SynthOutcome};
pub use slice::{backward_slice, slice_code};
pub use symex::{
    simplify_with_rules, symbolic_execute, symex_simplify, Rule, RuleSet, SymexBudget,
};
pub use taint::{taint_code, taint_forward, Granularity};

use crate::expr::{check_equiv, normalize, EquivStrategy, Expr};
use crate::obfuscate::{CoreSemantics, Handler};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("{0} needs a dynamic target")]
    NeedsDynamic(&'static str),
    #[error("{0} needs a static target")]
    NeedsStatic(&'static str),
    #[error("key {0:#x} is not in the key set of handler {1}")]
    UnknownKey(u64, usize),
    #[error("unknown attack `{0}`")]
    UnknownAttack(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Static,
    /// Observed key and, when available, the operand values `(x, y, c)`.
    Dynamic {
        k: u64,
        operands: Option<(u64, u64, u64)>,
    },
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Dynamic { .. } => "dynamic",
        }
    }
}

/// A handler under attack. `ground_truth` is only used for scoring.
#[derive(Debug, Clone)]
pub struct AttackTarget<'a> {
    pub handler: &'a Handler,
    pub mode: Mode,
    pub ground_truth: CoreSemantics,
}

impl<'a> AttackTarget<'a> {
    /// Dynamic target for the slot selected by `k`.
    pub fn dynamic(
        handler: &'a Handler,
        k: u64,
        operands: Option<(u64, u64, u64)>,
    ) -> Result<Self, AttackError> {
        let slot = handler
            .slot_for_key(k)
            .ok_or(AttackError::UnknownKey(k, handler.id))?;
        let ground_truth = handler.slots[slot].sem.clone();
        Ok(AttackTarget {
            handler,
            mode: Mode::Dynamic { k, operands },
            ground_truth,
        })
    }

    /// Static target; the attacker wants the semantics of `slot`.
    pub fn static_slot(handler: &'a Handler, slot: usize) -> Self {
        AttackTarget {
            handler,
            mode: Mode::Static,
            ground_truth: handler.slots[slot].sem.clone(),
        }
    }

    pub fn key(&self) -> Option<u64> {
        match self.mode {
            Mode::Static => None,
            Mode::Dynamic { k, .. } => Some(k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    Taint,
    Slice,
    Symex,
    Synth,
    Cegar,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::Taint,
        AttackKind::Slice,
        AttackKind::Symex,
        AttackKind::Synth,
        AttackKind::Cegar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Taint => "taint",
            AttackKind::Slice => "slice",
            AttackKind::Symex => "symex",
            AttackKind::Synth => "synth",
            AttackKind::Cegar => "cegar",
        }
    }
}

impl FromStr for AttackKind {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self, AttackError> {
        AttackKind::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| AttackError::UnknownAttack(s.to_string()))
    }
}

/// Field names every report line carries.
pub const REPORT_FIELDS: [&str; 8] = [
    "attack",
    "mode",
    "handler_id",
    "success",
    "unmarked_fraction",
    "time_ms",
    "budget_spent",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub mode: String,
    pub handler_id: usize,
    pub success: bool,
    pub unmarked_fraction: Option<f64>,
    pub time_ms: f64,
    pub budget_spent: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marked: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unmarked: Option<usize>,
    /// Simplified or synthesized expression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovered_key: Option<u64>,
    #[serde(default)]
    pub budget_exhausted: bool,
    /// Operator nodes of the analyzed code; stands in for path counts.
    pub expr_size: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl AttackReport {
    pub(crate) fn new(kind: AttackKind, mode: Mode, handler: &Handler, seed: u64) -> AttackReport {
        AttackReport {
            attack: kind.name().to_string(),
            mode: mode.name().to_string(),
            handler_id: handler.id,
            success: false,
            unmarked_fraction: None,
            time_ms: 0.0,
            budget_spent: 0,
            seed,
            marked: None,
            unmarked: None,
            output: None,
            recovered_key: None,
            budget_exhausted: false,
            expr_size: handler.merged.dag_op_count(),
            meta: BTreeMap::new(),
        }
    }

    pub(crate) fn set_marks(&mut self, marks: &[bool]) {
        let marked = marks.iter().filter(|&&m| m).count();
        self.marked = Some(marked);
        self.unmarked = Some(marks.len() - marked);
        self.unmarked_fraction = Some((marks.len() - marked) as f64 / marks.len().max(1) as f64);
    }
}

pub fn write_jsonl<W: Write>(reports: &[AttackReport], mut w: W) -> std::io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<AttackReport>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// `e` equals the ground truth after normalization and is confirmed
/// equivalent by sampling.
pub fn scores_as_simplified(e: &Expr, truth: &CoreSemantics) -> bool {
    normalize(e) == normalize(&truth.expr) && confirms(e, truth)
}

/// Sampling check against the ground truth.
pub fn confirms(e: &Expr, truth: &CoreSemantics) -> bool {
    matches!(
        check_equiv(e, &truth.expr, &EquivStrategy::RandomSampling { n: 10_000, seed: 0x5eed }),
        Ok(v) if v.is_equivalent()
    )
}

/// Run one attack with default budgets.
pub fn run_attack(
    kind: AttackKind,
    t: &AttackTarget<'_>,
    rules: &RuleSet,
    seed: u64,
) -> Result<AttackReport, AttackError> {
    match kind {
        AttackKind::Taint => Ok(taint_forward(t, Granularity::Bit, seed)),
        AttackKind::Slice => Ok(backward_slice(t, seed)),
        AttackKind::Symex => Ok(symex_simplify(t, rules, &SymexBudget::default(), seed)),
        AttackKind::Synth => synthesize_semantics(t, &SynthBudget::default(), seed),
        AttackKind::Cegar => {
            let codebook = [t.ground_truth.expr.clone()];
            cegar_key_recovery(t, &codebook, &CegarBudget::default(), seed)
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::expr::BinOp;

    /// `mov edx, eax; mov ecx, 0x20; add edx, ecx; add edx, 0x10` with
    /// eax as `x`.
    pub(crate) fn snippet() -> LinearCode {
        let (edx, ecx) = (FIRST_TEMP, FIRST_TEMP + 1);
        LinearCode {
            instrs: vec![
                LInstr::Mov {
                    dst: edx,
                    src: Src::Reg(REG_X),
                },
                LInstr::Mov {
                    dst: ecx,
                    src: Src::Imm(0x20),
                },
                LInstr::Bin {
                    dst: edx,
                    op: BinOp::Add,
                    a: edx,
                    b: Src::Reg(ecx),
                },
                LInstr::Bin {
                    dst: edx,
                    op: BinOp::Add,
                    a: edx,
                    b: Src::Imm(0x10),
                },
            ],
            output: edx,
        }
    }

    #[test]
    fn snippet_slices_fully_and_simplifies() {
        let code = snippet();
        assert_eq!(slice_code(&code), vec![true; 4]);
        assert_eq!(
            symbolic_execute(&code, None),
            normalize(&(Expr::x() + Expr::constant(0x30)))
        );
    }

    #[test]
    fn attack_names_round_trip() {
        for k in AttackKind::ALL {
            assert_eq!(k.name().parse::<AttackKind>().unwrap(), k);
        }
        assert!(matches!(
            "fuzz".parse::<AttackKind>(),
            Err(AttackError::UnknownAttack(_))
        ));
    }
}
