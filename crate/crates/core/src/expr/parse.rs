//! Readers for the prefix text form and the DAG line form.

use super::{BinOp, Expr, ExprError, UnOp, Var};

fn err(pos: usize, msg: impl Into<String>) -> ExprError {
    ExprError::Parse {
        pos,
        msg: msg.into(),
    }
}

pub(crate) fn parse_u64(s: &str) -> Option<u64> {
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(h, 16).ok()
    } else {
        s.parse().ok()
    }
}

fn var_of(s: &str) -> Option<Var> {
    Var::ALL.into_iter().find(|v| v.name() == s)
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

#[derive(Debug, PartialEq)]
enum Tok<'a> {
    Open,
    Close,
    Atom(&'a str),
    End,
}

impl<'a> Lexer<'a> {
    fn next(&mut self) -> (usize, Tok<'a>) {
        let b = self.src.as_bytes();
        while self.pos < b.len() && b[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        if self.pos >= b.len() {
            return (start, Tok::End);
        }
        match b[self.pos] {
            b'(' => {
                self.pos += 1;
                (start, Tok::Open)
            }
            b')' => {
                self.pos += 1;
                (start, Tok::Close)
            }
            _ => {
                while self.pos < b.len()
                    && !b[self.pos].is_ascii_whitespace()
                    && b[self.pos] != b'('
                    && b[self.pos] != b')'
                {
                    self.pos += 1;
                }
                (start, Tok::Atom(&self.src[start..self.pos]))
            }
        }
    }
}

fn parse_atom(pos: usize, a: &str) -> Result<Expr, ExprError> {
    if let Some(v) = var_of(a) {
        return Ok(Expr::var(v));
    }
    parse_u64(a)
        .map(Expr::constant)
        .ok_or_else(|| err(pos, format!("unknown atom `{a}`")))
}

fn parse_form(lx: &mut Lexer<'_>) -> Result<Expr, ExprError> {
    let (pos, t) = lx.next();
    match t {
        Tok::Atom(a) => parse_atom(pos, a),
        Tok::Open => {
            let (opos, head) = lx.next();
            let Tok::Atom(head) = head else {
                return Err(err(opos, "expected operator"));
            };
            let e = if head == "keybyte" {
                let (ip, it) = lx.next();
                let idx = match it {
                    Tok::Atom(s) => parse_u64(s).filter(|i| *i < 8),
                    _ => None,
                }
                .ok_or_else(|| err(ip, "keybyte index must be 0..7"))?;
                Expr::key_byte(idx as u8)
            } else if let Some(op) = UnOp::from_mnemonic(head) {
                Expr::unary(op, parse_form(lx)?)
            } else if let Some(op) = BinOp::from_mnemonic(head) {
                let a = parse_form(lx)?;
                let b = parse_form(lx)?;
                Expr::binary(op, a, b)
            } else {
                return Err(err(opos, format!("unknown operator `{head}`")));
            };
            match lx.next() {
                (_, Tok::Close) => Ok(e),
                (p, _) => Err(err(p, "expected `)`")),
            }
        }
        Tok::Close => Err(err(pos, "unexpected `)`")),
        Tok::End => Err(err(pos, "unexpected end of input")),
    }
}

/// Parse the fully parenthesized prefix form, e.g. `(add (xor x y) 3)`.
pub fn parse_expr(s: &str) -> Result<Expr, ExprError> {
    let mut lx = Lexer { src: s, pos: 0 };
    let e = parse_form(&mut lx)?;
    match lx.next() {
        (_, Tok::End) => Ok(e),
        (p, _) => Err(err(p, "trailing input")),
    }
}

/// Parse the output of [`Expr::to_dag_text`].
pub fn parse_dag(s: &str) -> Result<Expr, ExprError> {
    let mut nodes: Vec<Expr> = Vec::new();
    let mut offset = 0;
    for line in s.lines() {
        let pos = offset;
        offset += line.len() + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let id: usize = f[0].parse().map_err(|_| err(pos, "bad node id"))?;
        if id != nodes.len() {
            return Err(err(pos, "node ids must be consecutive"));
        }
        let arg = |i: usize| -> Result<Expr, ExprError> {
            let r: usize = f
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(pos, "missing operand"))?;
            nodes
                .get(r)
                .cloned()
                .ok_or_else(|| err(pos, "forward reference"))
        };
        let e = match f.get(1).copied() {
            Some("const") => Expr::constant(
                f.get(2)
                    .and_then(|s| parse_u64(s))
                    .ok_or_else(|| err(pos, "bad constant"))?,
            ),
            Some("keybyte") => {
                let i = f
                    .get(2)
                    .and_then(|s| parse_u64(s))
                    .filter(|i| *i < 8)
                    .ok_or_else(|| err(pos, "bad keybyte"))?;
                Expr::key_byte(i as u8)
            }
            Some(h) => {
                if let Some(v) = var_of(h) {
                    Expr::var(v)
                } else if let Some(op) = UnOp::from_mnemonic(h) {
                    Expr::unary(op, arg(2)?)
                } else if let Some(op) = BinOp::from_mnemonic(h) {
                    Expr::binary(op, arg(2)?, arg(3)?)
                } else {
                    return Err(err(pos, format!("unknown node `{h}`")));
                }
            }
            None => return Err(err(pos, "missing node kind")),
        };
        nodes.push(e);
    }
    nodes.pop().ok_or_else(|| err(0, "empty DAG"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for s in [
            "(add (xor x y) (mul 2 (and x y)))",
            "(divides 0x5fc8be6d (keybyte 0))",
            "(neg (shl c 0xffffffffffffffff))",
            "k",
        ] {
            assert_eq!(parse_expr(s).unwrap().to_string(), s);
        }
    }

    #[test]
    fn errors() {
        assert!(parse_expr("(add x)").is_err());
        assert!(parse_expr("(foo x y)").is_err());
        assert!(parse_expr("(add x y) z").is_err());
        assert!(parse_expr("(keybyte 9)").is_err());
        assert!(parse_dag("0 x\n1 add 0 5\n").is_err());
    }
}
