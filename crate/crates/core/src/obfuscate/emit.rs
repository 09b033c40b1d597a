//! Bytecode emission: map residual steps to handler slots and registers.

use std::collections::HashMap;

use rand::Rng;

use super::{HandlerSet, ObfError, Residual};
use crate::rng::Rng as StdRng;
use crate::vm::{BytecodeProgram, Step, VERSION};

fn intern(pool: &mut Vec<u64>, v: u64) -> u16 {
    match pool.iter().position(|&p| p == v) {
        Some(i) => i as u16,
        None => {
            pool.push(v);
            (pool.len() - 1) as u16
        }
    }
}

/// Each step goes to a random handler slot implementing its semantics.
/// Registers are reused once a value is dead.
pub fn emit_bytecode(
    r: &Residual,
    hs: &HandlerSet,
    rng: &mut StdRng,
) -> Result<BytecodeProgram, ObfError> {
    let mut last_use: HashMap<&str, usize> = HashMap::new();
    for (i, s) in r.steps.iter().enumerate() {
        for v in s.x.iter().chain(&s.y) {
            last_use.insert(v, i);
        }
    }
    last_use.insert(&r.ret, usize::MAX);

    let mut reg_of: HashMap<&str, u8> = HashMap::new();
    let mut free: Vec<usize> = Vec::new();
    let mut next = 0usize;
    let mut alloc = |free: &mut Vec<usize>| -> Result<u8, ObfError> {
        let reg = match free.pop() {
            Some(reg) => reg,
            None => {
                next += 1;
                next - 1
            }
        };
        u8::try_from(reg).map_err(|_| ObfError::TooManyRegisters(reg + 1))
    };
    let mut param_regs = Vec::new();
    for p in &r.params {
        let reg = alloc(&mut free)?;
        reg_of.insert(p, reg);
        param_regs.push(reg);
    }

    let mut const_pool: Vec<u64> = Vec::new();
    for s in &r.steps {
        if let Some(c) = s.c {
            intern(&mut const_pool, c);
        }
    }
    if const_pool.is_empty() {
        const_pool.push(0);
    }
    let mut key_pool = Vec::new();
    let mut steps = Vec::with_capacity(r.steps.len() + 1);
    for (i, s) in r.steps.iter().enumerate() {
        let cands = hs.slots_for_normalized(s.sem.normalized());
        if cands.is_empty() {
            return Err(ObfError::UnmappedSemantics(s.sem.canonical()));
        }
        let (h, slot) = cands[rng.gen_range(0..cands.len())];
        let key = hs.handlers[h].key_set.keys[slot];
        let read = |v: &Option<String>| v.as_ref().map_or(0, |v| reg_of[v.as_str()]);
        let (x_reg, y_reg) = (read(&s.x), read(&s.y));
        for v in s.x.iter().chain(&s.y) {
            if last_use.get(v.as_str()) == Some(&i)
                && !free.contains(&(reg_of[v.as_str()] as usize))
            {
                free.push(reg_of[v.as_str()] as usize);
            }
        }
        free.sort_unstable_by(|a, b| b.cmp(a));
        let out_reg = alloc(&mut free)?;
        reg_of.insert(&s.dest, out_reg);
        let const_idx = match s.c {
            Some(c) => intern(&mut const_pool, c),
            None => rng.gen_range(0..const_pool.len()) as u16,
        };
        steps.push(Step {
            handler_id: h as u16,
            x_reg,
            y_reg,
            out_reg,
            const_idx,
            key_idx: intern(&mut key_pool, key),
        });
    }
    if key_pool.is_empty() {
        key_pool.push(0);
    }
    steps.push(Step {
        handler_id: hs.exit_handler_id as u16,
        ..Default::default()
    });
    let ret_reg = reg_of[r.ret.as_str()];
    Ok(BytecodeProgram {
        version: VERSION,
        register_count: next.max(1) as u16,
        param_regs,
        ret_reg,
        const_pool,
        key_pool,
        steps,
    })
}
