//! Forward taint analysis over lowered handler code.

use std::time::Instant;

use super::lower::{lower, LInstr, LinearCode, Reg, Src, REG_C, REG_K, REG_X, REG_Y};
use super::{AttackKind, AttackReport, AttackTarget};
use crate::expr::{BinOp, UnOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Bit,
    Byte,
}

/// All bits at and above the lowest tainted one (carry propagation).
fn smear(m: u64) -> u64 {
    if m == 0 {
        0
    } else {
        !0u64 << m.trailing_zeros()
    }
}

fn bytes_of(m: u64) -> u64 {
    (0..8)
        .filter(|i| (m >> (8 * i)) & 0xff != 0)
        .fold(0, |acc, i| acc | (0xffu64 << (8 * i)))
}

fn bin_mask(op: BinOp, ma: u64, mb: u64, ka: Option<u64>, kb: Option<u64>) -> u64 {
    match op {
        BinOp::Add | BinOp::Sub | BinOp::Mul => smear(ma | mb),
        BinOp::Xor => ma | mb,
        // A bit of one operand matters where the other may be 1 (and) or 0 (or).
        BinOp::And => (ma & kb.unwrap_or(!0)) | (mb & ka.unwrap_or(!0)),
        BinOp::Or => (ma & !kb.unwrap_or(0)) | (mb & !ka.unwrap_or(0)),
        BinOp::Shl | BinOp::Shr => match kb {
            Some(s) if op == BinOp::Shl => ma << (s & 63),
            Some(s) => ma >> (s & 63),
            None if ma | mb != 0 => !0,
            None => 0,
        },
        BinOp::Divides => ((ma | mb) != 0) as u64,
    }
}

/// Per-instruction taint marks: an instruction is marked iff one of its
/// operands carries taint. Constants are tracked so masks and shift
/// amounts refine bit-level taint. `known` seeds concrete register values;
/// a known register may still be a source.
pub fn taint_code(
    code: &LinearCode,
    sources: &[Reg],
    known_inputs: &[(Reg, u64)],
    g: Granularity,
) -> Vec<bool> {
    let n = code.reg_count();
    let mut mask = vec![0u64; n];
    let mut known: Vec<Option<u64>> = vec![None; n];
    for &s in sources {
        mask[s as usize] = !0;
    }
    for &(r, v) in known_inputs {
        known[r as usize] = Some(v);
    }
    let src = |mask: &[u64], known: &[Option<u64>], s: &Src| match s {
        Src::Reg(r) => (mask[*r as usize], known[*r as usize]),
        Src::Imm(v) => (0, Some(*v)),
    };
    let mut marks = Vec::with_capacity(code.instrs.len());
    for i in &code.instrs {
        let (m, k, marked) = match i {
            LInstr::Mov { src: s, .. } => {
                let (m, k) = src(&mask, &known, s);
                (m, k, m != 0)
            }
            LInstr::Un { op, a, .. } => {
                let (m, k) = (mask[*a as usize], known[*a as usize]);
                let out = if *op == UnOp::Neg { smear(m) } else { m };
                (out, k.map(|v| op.apply(v)), m != 0)
            }
            LInstr::Bin { op, a, b, .. } => {
                let (ma, ka) = (mask[*a as usize], known[*a as usize]);
                let (mb, kb) = src(&mask, &known, b);
                let folded = ka.zip(kb).map(|(x, y)| op.apply(x, y));
                (bin_mask(*op, ma, mb, ka, kb), folded, ma | mb != 0)
            }
            LInstr::Load { addr, .. } => (0, None, mask[*addr as usize] != 0),
            // Reading a parameter location reads a taint source.
            LInstr::Input { dst, addr, .. } => {
                let m = if sources.contains(dst) { !0 } else { 0 };
                let k = known_inputs.iter().find(|(r, _)| r == dst).map(|&(_, v)| v);
                (m, k, m != 0 || mask[*addr as usize] != 0)
            }
            LInstr::Store { addr, src } => {
                (0, None, mask[*addr as usize] | mask[*src as usize] != 0)
            }
            LInstr::Jump { target } => (0, None, mask[*target as usize] != 0),
        };
        if let Some(d) = i.dst() {
            mask[d as usize] = match g {
                Granularity::Bit => m,
                Granularity::Byte => bytes_of(m),
            };
            known[d as usize] = k;
        }
        marks.push(marked);
    }
    marks
}

/// Sources are `x`, `y`, `c` and `k` in both modes. A dynamic attacker also
/// knows `k`'s value, which refines masks of values derived from it.
pub fn taint_forward(t: &AttackTarget<'_>, g: Granularity, seed: u64) -> AttackReport {
    let start = Instant::now();
    let code = lower(&t.handler.merged);
    let known: Vec<(Reg, u64)> = t.key().map(|k| (REG_K, k)).into_iter().collect();
    let marks = taint_code(&code, &[REG_X, REG_Y, REG_C, REG_K], &known, g);
    let mut r = AttackReport::new(AttackKind::Taint, t.mode, t.handler, seed);
    r.set_marks(&marks);
    r.budget_spent = code.instrs.len() as u64;
    r.meta
        .insert("granularity".into(), format!("{g:?}").to_lowercase());
    r.time_ms = start.elapsed().as_secs_f64() * 1e3;
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::lower::FIRST_TEMP;

    #[test]
    fn smear_and_bytes() {
        assert_eq!(smear(0b100), !0u64 << 2);
        assert_eq!(smear(0), 0);
        assert_eq!(bytes_of(0x0100_0001), 0xff00_00ff);
    }

    #[test]
    fn constant_masks_clear_taint() {
        // t = (x & 0xff00) >> 16 carries no taint at bit level.
        let t = FIRST_TEMP;
        let code = LinearCode {
            instrs: vec![
                LInstr::Bin {
                    dst: t,
                    op: BinOp::And,
                    a: REG_X,
                    b: Src::Imm(0xff00),
                },
                LInstr::Bin {
                    dst: t + 1,
                    op: BinOp::Shr,
                    a: t,
                    b: Src::Imm(16),
                },
                LInstr::Bin {
                    dst: t + 2,
                    op: BinOp::Add,
                    a: t + 1,
                    b: Src::Imm(1),
                },
            ],
            output: t + 2,
        };
        assert_eq!(
            taint_code(&code, &[REG_X], &[], Granularity::Bit),
            vec![true, true, false]
        );
        assert_eq!(
            taint_code(&code, &[REG_X], &[], Granularity::Byte),
            vec![true, true, false]
        );
    }

    #[test]
    fn known_tainted_operands_keep_taint() {
        // x & k with k known to be 0 still depends on k.
        let t = FIRST_TEMP;
        let code = LinearCode {
            instrs: vec![
                LInstr::Bin {
                    dst: t,
                    op: BinOp::And,
                    a: REG_X,
                    b: Src::Reg(REG_K),
                },
                LInstr::Bin {
                    dst: t + 1,
                    op: BinOp::Add,
                    a: t,
                    b: Src::Imm(1),
                },
            ],
            output: t + 1,
        };
        assert_eq!(
            taint_code(&code, &[REG_X, REG_K], &[(REG_K, 0)], Granularity::Bit),
            vec![true, true]
        );
        // Untainted but known k: the mask clears x's taint.
        assert_eq!(
            taint_code(&code, &[REG_X], &[(REG_K, 0)], Granularity::Bit),
            vec![true, false]
        );
    }

    #[test]
    fn snippet_taints_all_but_the_constant_load() {
        let m = crate::attacks::tests::snippet();
        assert_eq!(
            taint_code(&m, &[REG_X], &[], Granularity::Byte),
            vec![true, false, true, true]
        );
        assert_eq!(
            taint_code(&m, &[REG_X], &[], Granularity::Bit),
            vec![true, false, true, true]
        );
    }
}
