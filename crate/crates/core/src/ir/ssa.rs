//! SSA conversion with copy propagation of `mov` and folding of
//! constant-only instructions.

use std::collections::{HashMap, HashSet};

use super::{Operand, TacInstr, TacOp, TacProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Def {
    Param(usize),
    Instr(usize),
}

/// Every name assigned once; no `mov`; every instruction has at least one
/// variable operand. `ret` is a constant only when the result folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsaProgram {
    pub name: String,
    pub params: Vec<String>,
    pub body: Vec<TacInstr>,
    pub ret: Operand,
    defs: HashMap<String, Def>,
}

impl SsaProgram {
    /// Defining site of a variable use.
    pub fn def_of(&self, var: &str) -> Option<Def> {
        self.defs.get(var).copied()
    }

    /// Use-def map: for instruction `i`, the definitions of its operands.
    pub fn use_def(&self, i: usize) -> Vec<Option<Def>> {
        self.body[i]
            .operands()
            .map(|o| o.as_var().and_then(|v| self.def_of(v)))
            .collect()
    }

    /// View as an ordinary program (a constant result becomes a `mov`).
    pub fn to_tac(&self) -> TacProgram {
        let mut body = self.body.clone();
        let ret = match &self.ret {
            Operand::Var(v) => v.clone(),
            Operand::Const(c) => {
                let mut n = "ret".to_string();
                while self.defs.contains_key(&n) {
                    n.push('_');
                }
                body.push(TacInstr::un(&n, TacOp::Mov, Operand::Const(*c)));
                n
            }
        };
        TacProgram {
            name: self.name.clone(),
            params: self.params.clone(),
            body,
            ret,
        }
    }
}

pub fn to_ssa(p: &TacProgram) -> SsaProgram {
    let mut taken: HashSet<String> = p.params.iter().cloned().collect();
    taken.extend(p.body.iter().map(|i| i.dest.clone()));
    let mut version: HashMap<&str, usize> = HashMap::new();
    let mut current: HashMap<String, Operand> = p
        .params
        .iter()
        .map(|a| (a.clone(), Operand::Var(a.clone())))
        .collect();
    let mut defs: HashMap<String, Def> = p
        .params
        .iter()
        .enumerate()
        .map(|(i, a)| (a.clone(), Def::Param(i)))
        .collect();
    let mut body = Vec::new();
    for ins in &p.body {
        let resolve = |o: &Operand| match o {
            Operand::Var(v) => current[v].clone(),
            c => c.clone(),
        };
        let lhs = resolve(&ins.lhs);
        let rhs = ins.rhs.as_ref().map(resolve);
        let value = match (&ins.op, &lhs, &rhs) {
            (TacOp::Mov, l, _) => Some(l.clone()),
            (op, Operand::Const(a), None) => Some(Operand::Const(op.apply(*a, 0))),
            (op, Operand::Const(a), Some(Operand::Const(b))) => {
                Some(Operand::Const(op.apply(*a, *b)))
            }
            _ => None,
        };
        if let Some(v) = value {
            current.insert(ins.dest.clone(), v);
            continue;
        }
        let base = ins.dest.as_str();
        let name = loop {
            let n = version.entry(base).or_insert(0);
            *n += 1;
            let cand = format!("{base}{n}");
            if !taken.contains(&cand) {
                break cand;
            }
            let alt = format!("{base}_{n}");
            if !taken.contains(&alt) {
                break alt;
            }
        };
        taken.insert(name.clone());
        defs.insert(name.clone(), Def::Instr(body.len()));
        current.insert(ins.dest.clone(), Operand::Var(name.clone()));
        body.push(TacInstr {
            dest: name,
            op: ins.op,
            lhs,
            rhs,
        });
    }
    let ret = current[&p.ret].clone();
    SsaProgram {
        name: p.name.clone(),
        params: p.params.clone(),
        body,
        ret,
        defs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{eval_tac, parse_tac};

    #[test]
    fn reassigned_chain() {
        let p = parse_tac("func f(a,b){ d = a + b; b = a * d; d = b | d; return d }").unwrap();
        let s = to_ssa(&p);
        let text: Vec<String> = s.body.iter().map(|i| i.to_string()).collect();
        assert_eq!(text, ["d1 = a + b", "b1 = a * d1", "d2 = b1 | d1"]);
        assert_eq!(s.ret, Operand::var("d2"));
        assert_eq!(s.use_def(2), vec![Some(Def::Instr(1)), Some(Def::Instr(0))]);
        assert_eq!(s.use_def(0), vec![Some(Def::Param(0)), Some(Def::Param(1))]);
    }

    #[test]
    fn single_instruction_gets_version() {
        let p = parse_tac("func f(a,b){ t = a + b; return t }").unwrap();
        let s = to_ssa(&p);
        assert_eq!(s.body[0].dest, "t1");
        assert_eq!(eval_tac(&s.to_tac(), &[3, 4]).unwrap(), 7);
    }

    #[test]
    fn copies_and_constants_fold() {
        let p =
            parse_tac("func f(a){ t = a; u = 3; v = u * 5; w = t + v; z = 9; return z }").unwrap();
        let s = to_ssa(&p);
        assert_eq!(s.body.len(), 1);
        assert_eq!(s.body[0].to_string(), "w1 = a + 15");
        assert_eq!(s.ret, Operand::Const(9));
        assert_eq!(eval_tac(&s.to_tac(), &[1]).unwrap(), 9);
    }

    #[test]
    fn versions_avoid_existing_names() {
        let p = parse_tac("func f(a){ d = a + 1; d1 = d * 2; d = d1 | d; return d }").unwrap();
        let s = to_ssa(&p);
        let names: HashSet<&str> = s.body.iter().map(|i| i.dest.as_str()).collect();
        assert_eq!(names.len(), 3);
        assert_eq!(
            eval_tac(&s.to_tac(), &[5]).unwrap(),
            eval_tac(&p, &[5]).unwrap()
        );
    }
}
