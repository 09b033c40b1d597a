//! Backward slicing from the handler output.

use std::collections::HashSet;
use std::time::Instant;

use super::lower::{lower, LInstr, LinearCode};
use super::{AttackKind, AttackReport, AttackTarget};

/// Instructions the output depends on through use-def edges, starting
/// from the result store (or the output register when there is none). The
/// slice is syntactic: a use is followed even when its value cannot matter.
pub fn slice_code(code: &LinearCode) -> Vec<bool> {
    let has_store = code
        .instrs
        .iter()
        .any(|i| matches!(i, LInstr::Store { .. }));
    let mut live: HashSet<u32> = if has_store {
        HashSet::new()
    } else {
        HashSet::from([code.output])
    };
    let mut marks = vec![false; code.instrs.len()];
    for (i, ins) in code.instrs.iter().enumerate().rev() {
        if let LInstr::Store { .. } = ins {
            marks[i] = true;
            live.extend(ins.uses());
        } else if let Some(d) = ins.dst() {
            if live.remove(&d) {
                marks[i] = true;
                live.extend(ins.uses());
            }
        }
    }
    marks
}

pub fn backward_slice(t: &AttackTarget<'_>, seed: u64) -> AttackReport {
    let start = Instant::now();
    let code = lower(&t.handler.merged);
    let marks = slice_code(&code);
    let mut r = AttackReport::new(AttackKind::Slice, t.mode, t.handler, seed);
    r.set_marks(&marks);
    r.budget_spent = code.instrs.len() as u64;
    r.time_ms = start.elapsed().as_secs_f64() * 1e3;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::lower::{Src, FIRST_TEMP, REG_X};
    use crate::expr::BinOp;

    #[test]
    fn dead_code_after_output_is_unmarked() {
        let t = FIRST_TEMP;
        let code = LinearCode {
            instrs: vec![
                LInstr::Bin {
                    dst: t,
                    op: BinOp::Add,
                    a: REG_X,
                    b: Src::Imm(1),
                },
                LInstr::Bin {
                    dst: t + 1,
                    op: BinOp::Mul,
                    a: REG_X,
                    b: Src::Reg(REG_X),
                },
                LInstr::Bin {
                    dst: t + 2,
                    op: BinOp::Xor,
                    a: t + 1,
                    b: Src::Imm(7),
                },
            ],
            output: t,
        };
        assert_eq!(slice_code(&code), vec![true, false, false]);
    }

    #[test]
    fn redefinition_ends_the_slice() {
        let t = FIRST_TEMP;
        let code = LinearCode {
            instrs: vec![
                LInstr::Mov {
                    dst: t,
                    src: Src::Imm(3),
                },
                LInstr::Mov {
                    dst: t,
                    src: Src::Reg(REG_X),
                },
                LInstr::Bin {
                    dst: t,
                    op: BinOp::Add,
                    a: t,
                    b: Src::Imm(1),
                },
            ],
            output: t,
        };
        assert_eq!(slice_code(&code), vec![false, true, true]);
    }
}
