//! Bytecode format and interpreter.
//!
//! Layout (little-endian):
//! ```text
//! "LOKI" u16 version u16 register_count
//! u16 n_params, n_params × u8 param register, u8 ret register
//! u32 n, n × u64 constant pool
//! u32 n, n × u64 key pool
//! u32 n, n × 10-byte step:
//!     u16 handler, u8 x, u8 y, u8 out, u8 reserved (0), u16 const_idx, u16 key_idx
//! ```

use thiserror::Error;

use crate::expr::{Columns, EDGE_CASES};
use crate::obfuscate::HandlerSet;

pub const MAGIC: &[u8; 4] = b"LOKI";
pub const VERSION: u16 = 1;
pub const STEP_BYTES: usize = 10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VmError {
    #[error("{what} index {index} out of range at step {step}")]
    IndexOutOfRange {
        step: usize,
        what: &'static str,
        index: usize,
    },
    #[error("handler {0} is not in the handler set")]
    HandlerMissing(usize),
    #[error("expected {expected} arguments, got {got}")]
    ArgCount { expected: usize, got: usize },
    #[error("bad bytecode: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Step {
    pub handler_id: u16,
    pub x_reg: u8,
    pub y_reg: u8,
    pub out_reg: u8,
    pub const_idx: u16,
    pub key_idx: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BytecodeProgram {
    pub version: u16,
    pub register_count: u16,
    pub param_regs: Vec<u8>,
    pub ret_reg: u8,
    pub const_pool: Vec<u64>,
    pub key_pool: Vec<u64>,
    pub steps: Vec<Step>,
}

impl BytecodeProgram {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(
            32 + 8 * (self.const_pool.len() + self.key_pool.len()) + STEP_BYTES * self.steps.len(),
        );
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        b.extend_from_slice(&self.register_count.to_le_bytes());
        b.extend_from_slice(&(self.param_regs.len() as u16).to_le_bytes());
        b.extend_from_slice(&self.param_regs);
        b.push(self.ret_reg);
        for pool in [&self.const_pool, &self.key_pool] {
            b.extend_from_slice(&(pool.len() as u32).to_le_bytes());
            for v in pool {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        for s in &self.steps {
            b.extend_from_slice(&s.handler_id.to_le_bytes());
            b.extend_from_slice(&[s.x_reg, s.y_reg, s.out_reg, 0]);
            b.extend_from_slice(&s.const_idx.to_le_bytes());
            b.extend_from_slice(&s.key_idx.to_le_bytes());
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> Result<BytecodeProgram, VmError> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(VmError::Decode("bad magic".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(VmError::Decode(format!("unsupported version {version}")));
        }
        let register_count = r.u16()?;
        let np = r.u16()? as usize;
        let param_regs = r.take(np)?.to_vec();
        let ret_reg = r.take(1)?[0];
        let mut pools = [Vec::new(), Vec::new()];
        for pool in &mut pools {
            let n = r.u32()? as usize;
            for _ in 0..n {
                pool.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
        }
        let [const_pool, key_pool] = pools;
        let n = r.u32()? as usize;
        let mut steps = Vec::with_capacity(n.min(bytes.len() / STEP_BYTES));
        for _ in 0..n {
            let handler_id = r.u16()?;
            let regs = r.take(4)?;
            if regs[3] != 0 {
                return Err(VmError::Decode("reserved byte is not zero".into()));
            }
            let const_idx = r.u16()?;
            let key_idx = r.u16()?;
            steps.push(Step {
                handler_id,
                x_reg: regs[0],
                y_reg: regs[1],
                out_reg: regs[2],
                const_idx,
                key_idx,
            });
        }
        if r.pos != bytes.len() {
            return Err(VmError::Decode("trailing bytes".into()));
        }
        Ok(BytecodeProgram {
            version,
            register_count,
            param_regs,
            ret_reg,
            const_pool,
            key_pool,
            steps,
        })
    }

    /// Every index in range and the stream ends with exactly one exit step.
    pub fn validate(&self, hs: &HandlerSet) -> Result<(), VmError> {
        let regs = self.register_count as usize;
        let reg_ok = |step: usize, r: u8| {
            if (r as usize) < regs {
                Ok(())
            } else {
                Err(VmError::IndexOutOfRange {
                    step,
                    what: "register",
                    index: r as usize,
                })
            }
        };
        for &p in &self.param_regs {
            reg_ok(0, p)?;
        }
        reg_ok(self.steps.len(), self.ret_reg)?;
        let Some(last) = self.steps.last() else {
            return Err(VmError::Decode("no exit step".into()));
        };
        if last.handler_id as usize != hs.exit_handler_id {
            return Err(VmError::Decode("last step is not the exit handler".into()));
        }
        for (i, s) in self.steps[..self.steps.len() - 1].iter().enumerate() {
            let h = s.handler_id as usize;
            if h >= hs.handlers.len() {
                return Err(VmError::HandlerMissing(h));
            }
            for r in [s.x_reg, s.y_reg, s.out_reg] {
                reg_ok(i, r)?;
            }
            if s.const_idx as usize >= self.const_pool.len() {
                return Err(VmError::IndexOutOfRange {
                    step: i,
                    what: "constant pool",
                    index: s.const_idx as usize,
                });
            }
            if s.key_idx as usize >= self.key_pool.len() {
                return Err(VmError::IndexOutOfRange {
                    step: i,
                    what: "key pool",
                    index: s.key_idx as usize,
                });
            }
        }
        Ok(())
    }

    /// Number of compute steps (excluding the exit).
    pub fn compute_steps(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VmError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| VmError::Decode("truncated".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, VmError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, VmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceStep {
    pub handler_id: usize,
    pub x: u64,
    pub y: u64,
    pub c: u64,
    pub k: u64,
    pub out: u64,
}

/// One record per executed step, including the exit.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecTrace {
    pub steps: Vec<TraceStep>,
}

fn exec(
    bp: &BytecodeProgram,
    hs: &HandlerSet,
    args: &[u64],
    mut trace: Option<&mut ExecTrace>,
) -> Result<u64, VmError> {
    if args.len() != bp.param_regs.len() {
        return Err(VmError::ArgCount {
            expected: bp.param_regs.len(),
            got: args.len(),
        });
    }
    bp.validate(hs)?;
    let mut regs = vec![0u64; bp.register_count as usize];
    for (&r, &a) in bp.param_regs.iter().zip(args) {
        regs[r as usize] = a;
    }
    let mut scratch = Vec::new();
    for s in &bp.steps {
        if s.handler_id as usize == hs.exit_handler_id {
            let out = regs[bp.ret_reg as usize];
            if let Some(t) = trace.as_deref_mut() {
                t.steps.push(TraceStep {
                    handler_id: hs.exit_handler_id,
                    x: 0,
                    y: 0,
                    c: 0,
                    k: 0,
                    out,
                });
            }
            return Ok(out);
        }
        let h = &hs.handlers[s.handler_id as usize];
        let env = crate::expr::Assignment {
            x: regs[s.x_reg as usize],
            y: regs[s.y_reg as usize],
            c: bp.const_pool[s.const_idx as usize],
            k: bp.key_pool[s.key_idx as usize],
        };
        let out = h.compiled().eval_into(&env, &mut scratch);
        regs[s.out_reg as usize] = out;
        if let Some(t) = trace.as_deref_mut() {
            t.steps.push(TraceStep {
                handler_id: h.id,
                x: env.x,
                y: env.y,
                c: env.c,
                k: env.k,
                out,
            });
        }
    }
    unreachable!("validated programs end in an exit step")
}

pub fn run(bp: &BytecodeProgram, hs: &HandlerSet, args: &[u64]) -> Result<u64, VmError> {
    exec(bp, hs, args, None)
}

pub fn run_traced(
    bp: &BytecodeProgram,
    hs: &HandlerSet,
    args: &[u64],
) -> Result<(u64, ExecTrace), VmError> {
    let mut t = ExecTrace::default();
    let v = exec(bp, hs, args, Some(&mut t))?;
    Ok((v, t))
}

/// Run many inputs at once. `args[p]` holds parameter `p` for every lane;
/// results match `run` lane by lane.
pub fn run_batch(
    bp: &BytecodeProgram,
    hs: &HandlerSet,
    args: &[Vec<u64>],
) -> Result<Vec<u64>, VmError> {
    if args.len() != bp.param_regs.len() {
        return Err(VmError::ArgCount {
            expected: bp.param_regs.len(),
            got: args.len(),
        });
    }
    bp.validate(hs)?;
    let lanes = args.first().map_or(1, |a| a.len());
    if args.iter().any(|a| a.len() != lanes) {
        return Err(VmError::Decode("argument columns differ in length".into()));
    }
    let mut regs = vec![vec![0u64; lanes]; bp.register_count as usize];
    for (&r, a) in bp.param_regs.iter().zip(args) {
        regs[r as usize].copy_from_slice(a);
    }
    let mut out = vec![0u64; lanes];
    for s in &bp.steps {
        if s.handler_id as usize == hs.exit_handler_id {
            return Ok(std::mem::take(&mut regs[bp.ret_reg as usize]));
        }
        let h = &hs.handlers[s.handler_id as usize];
        let c = [bp.const_pool[s.const_idx as usize]];
        let k = [bp.key_pool[s.key_idx as usize]];
        h.compiled().eval_batch(
            &Columns {
                x: &regs[s.x_reg as usize],
                y: &regs[s.y_reg as usize],
                c: &c,
                k: &k,
            },
            &mut out,
        );
        std::mem::swap(&mut regs[s.out_reg as usize], &mut out);
    }
    unreachable!("validated programs end in an exit step")
}

/// Random inputs followed by the full edge-case product over all
/// parameters, as argument columns.
pub fn verification_inputs(params: usize, random: usize, seed: u64) -> Vec<Vec<u64>> {
    use rand::Rng;
    let mut r = crate::rng::rng(seed);
    let mut cols: Vec<Vec<u64>> = (0..params)
        .map(|_| (0..random).map(|_| r.gen()).collect())
        .collect();
    let combos = EDGE_CASES.len().pow(params as u32);
    for mut i in 0..combos {
        for col in cols.iter_mut() {
            col.push(EDGE_CASES[i % EDGE_CASES.len()]);
            i /= EDGE_CASES.len();
        }
    }
    cols
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BytecodeProgram {
        BytecodeProgram {
            version: VERSION,
            register_count: 3,
            param_regs: vec![0, 1],
            ret_reg: 2,
            const_pool: vec![0, 0xdead_beef],
            key_pool: vec![7, 1 << 63],
            steps: vec![
                Step {
                    handler_id: 0,
                    x_reg: 0,
                    y_reg: 1,
                    out_reg: 2,
                    const_idx: 1,
                    key_idx: 1,
                },
                Step {
                    handler_id: 3,
                    ..Default::default()
                },
            ],
        }
    }

    #[test]
    fn codec_round_trip_and_layout() {
        let bp = sample();
        let bytes = bp.encode();
        assert_eq!(&bytes[..4], b"LOKI");
        assert_eq!(
            bytes.len(),
            4 + 2 + 2 + 2 + 2 + 1 + 4 + 16 + 4 + 16 + 4 + 2 * STEP_BYTES
        );
        assert_eq!(BytecodeProgram::decode(&bytes).unwrap(), bp);
        assert_eq!(BytecodeProgram::decode(&bytes).unwrap().encode(), bytes);
        assert!(BytecodeProgram::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(BytecodeProgram::decode(&bad).is_err());
    }

    #[test]
    fn edge_product_size() {
        let cols = verification_inputs(2, 10_000, 1);
        assert_eq!(cols[1].len(), 10_036);
        assert_eq!(verification_inputs(3, 0, 1)[0].len(), 216);
    }
}
