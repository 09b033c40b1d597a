//! Mini-IR reader.

use super::{IrError, Operand, TacInstr, TacOp, TacProgram};
use crate::expr::parse::parse_u64;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Punct(&'static str),
    Other(String),
    Sep,
    End,
}

struct Lexed {
    tok: Tok,
    line: usize,
    col: usize,
}

const PUNCT: [&str; 16] = [
    "<<", ">>", "(", ")", "{", "}", ",", "=", "+", "-", "*", "&", "|", "^", "~", ";",
];

fn lex(src: &str) -> Result<Vec<Lexed>, IrError> {
    let mut out = Vec::new();
    for (ln, line) in src.lines().enumerate() {
        let line_no = ln + 1;
        let code = line.split('#').next().unwrap_or("");
        let b = code.as_bytes();
        let mut i = 0;
        while i < b.len() {
            let col = i + 1;
            let ch = b[i];
            if ch.is_ascii_whitespace() {
                i += 1;
                continue;
            }
            if ch.is_ascii_alphabetic() || ch == b'_' {
                let s = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                out.push(Lexed {
                    tok: Tok::Ident(code[s..i].to_string()),
                    line: line_no,
                    col,
                });
                continue;
            }
            if ch.is_ascii_digit() {
                let s = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                let text = &code[s..i];
                let v = parse_u64(text).ok_or_else(|| IrError::Syntax {
                    line: line_no,
                    col,
                    msg: format!("malformed integer `{text}`"),
                })?;
                out.push(Lexed {
                    tok: Tok::Int(v),
                    line: line_no,
                    col,
                });
                continue;
            }
            if let Some(p) = PUNCT.iter().find(|p| code[i..].starts_with(**p)) {
                i += p.len();
                let tok = if *p == ";" { Tok::Sep } else { Tok::Punct(p) };
                out.push(Lexed {
                    tok,
                    line: line_no,
                    col,
                });
                continue;
            }
            let s = i;
            i += 1;
            while i < b.len()
                && !b[i].is_ascii_alphanumeric()
                && !b[i].is_ascii_whitespace()
                && !is_punct_start(b[i])
            {
                i += 1;
            }
            out.push(Lexed {
                tok: Tok::Other(code[s..i].to_string()),
                line: line_no,
                col,
            });
        }
        out.push(Lexed {
            tok: Tok::Sep,
            line: line_no,
            col: code.len() + 1,
        });
    }
    let last = out.last().map(|l| l.line).unwrap_or(1);
    out.push(Lexed {
        tok: Tok::End,
        line: last,
        col: 1,
    });
    Ok(out)
}

fn is_punct_start(c: u8) -> bool {
    b"(){},=+-*&|^~;<>".contains(&c)
}

struct Parser {
    toks: Vec<Lexed>,
    i: usize,
}

impl Parser {
    fn peek(&self) -> &Lexed {
        &self.toks[self.i]
    }
    fn bump(&mut self) -> &Lexed {
        let t = &self.toks[self.i];
        if self.i + 1 < self.toks.len() {
            self.i += 1;
        }
        t
    }
    fn syntax(&self, msg: impl Into<String>) -> IrError {
        let t = self.peek();
        IrError::Syntax {
            line: t.line,
            col: t.col,
            msg: msg.into(),
        }
    }
    fn skip_seps(&mut self) {
        while self.peek().tok == Tok::Sep {
            self.bump();
        }
    }
    fn expect(&mut self, p: &'static str) -> Result<(), IrError> {
        self.skip_seps();
        if self.peek().tok == Tok::Punct(p) {
            self.bump();
            Ok(())
        } else {
            Err(self.syntax(format!("expected `{p}`")))
        }
    }
    fn ident(&mut self) -> Result<String, IrError> {
        self.skip_seps();
        match &self.peek().tok {
            Tok::Ident(s) if s != "func" && s != "return" => {
                let s = s.clone();
                self.bump();
                Ok(s)
            }
            _ => Err(self.syntax("expected identifier")),
        }
    }
    fn operand(&mut self) -> Result<(Operand, usize, usize), IrError> {
        let t = self.peek();
        let (line, col) = (t.line, t.col);
        let o = match &t.tok {
            Tok::Ident(s) if s != "func" && s != "return" => Operand::Var(s.clone()),
            Tok::Int(v) => Operand::Const(*v),
            _ => return Err(self.syntax("expected operand")),
        };
        self.bump();
        Ok((o, line, col))
    }
}

fn binop_of(p: &str) -> Option<TacOp> {
    Some(match p {
        "+" => TacOp::Add,
        "-" => TacOp::Sub,
        "*" => TacOp::Mul,
        "&" => TacOp::And,
        "|" => TacOp::Or,
        "^" => TacOp::Xor,
        "<<" => TacOp::Shl,
        ">>" => TacOp::Shr,
        _ => return None,
    })
}

/// Parse and validate a mini-IR program.
pub fn parse_tac(text: &str) -> Result<TacProgram, IrError> {
    let mut p = Parser {
        toks: lex(text)?,
        i: 0,
    };
    p.skip_seps();
    match &p.peek().tok {
        Tok::Ident(s) if s == "func" => {
            p.bump();
        }
        _ => return Err(p.syntax("expected `func`")),
    }
    let name = p.ident()?;
    p.expect("(")?;
    let mut params = vec![p.ident()?];
    loop {
        p.skip_seps();
        if p.peek().tok == Tok::Punct(",") {
            p.bump();
            params.push(p.ident()?);
        } else {
            break;
        }
    }
    p.expect(")")?;
    p.expect("{")?;
    for (i, a) in params.iter().enumerate() {
        if params[..i].contains(a) {
            return Err(IrError::Syntax {
                line: 1,
                col: 1,
                msg: format!("duplicate parameter `{a}`"),
            });
        }
    }
    let mut defined: std::collections::HashSet<String> = params.iter().cloned().collect();
    let mut body = Vec::new();
    let check = |o: &Operand, line, col, defined: &std::collections::HashSet<String>| match o {
        Operand::Var(v) if !defined.contains(v) => Err(IrError::UseBeforeDef {
            name: v.clone(),
            line,
            col,
        }),
        _ => Ok(()),
    };
    let ret = loop {
        p.skip_seps();
        if matches!(&p.peek().tok, Tok::Ident(s) if s == "return") {
            p.bump();
            let t = p.peek();
            let (line, col) = (t.line, t.col);
            let r = p.ident()?;
            if !defined.contains(&r) {
                return Err(IrError::UseBeforeDef { name: r, line, col });
            }
            p.expect("}")?;
            p.skip_seps();
            if p.peek().tok != Tok::End {
                return Err(p.syntax("trailing input after `}`"));
            }
            break r;
        }
        let dest = p.ident()?;
        p.expect("=")?;
        let instr = match p.peek().tok.clone() {
            Tok::Punct(u @ ("~" | "-")) => {
                p.bump();
                let (o, l, c) = p.operand()?;
                check(&o, l, c, &defined)?;
                TacInstr::un(&dest, if u == "~" { TacOp::Not } else { TacOp::Neg }, o)
            }
            _ => {
                let (lhs, l, c) = p.operand()?;
                check(&lhs, l, c, &defined)?;
                let t = p.peek();
                let (line, col) = (t.line, t.col);
                match t.tok.clone() {
                    Tok::Sep | Tok::Punct("}") => TacInstr::un(&dest, TacOp::Mov, lhs),
                    Tok::Punct(s) if binop_of(s).is_some() => {
                        p.bump();
                        let (rhs, l, c) = p.operand()?;
                        check(&rhs, l, c, &defined)?;
                        TacInstr::bin(&dest, binop_of(s).unwrap(), lhs, rhs)
                    }
                    Tok::Punct(s) => {
                        return Err(IrError::UnknownOp {
                            op: s.to_string(),
                            line,
                            col,
                        })
                    }
                    Tok::Other(s) => return Err(IrError::UnknownOp { op: s, line, col }),
                    Tok::Ident(s) => return Err(IrError::UnknownOp { op: s, line, col }),
                    _ => return Err(p.syntax("expected operator")),
                }
            }
        };
        match p.peek().tok {
            Tok::Sep | Tok::Punct("}") => {}
            _ => return Err(p.syntax("expected end of statement")),
        }
        defined.insert(dest);
        body.push(instr);
    };
    if body.is_empty() {
        return Err(IrError::Syntax {
            line: 1,
            col: 1,
            msg: "function body has no statements".into(),
        });
    }
    Ok(TacProgram {
        name,
        params,
        body,
        ret,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_and_reassigned_chain() {
        let p = parse_tac("func f(a,b){ t0 = a + b; return t0 }").unwrap();
        assert_eq!(p.body.len(), 1);
        assert_eq!(p.ret, "t0");
        let p = parse_tac("func f(a,b){ d = a + b; b1 = a * d; d2 = b1 | d; return d2 }").unwrap();
        assert_eq!(p.body.len(), 3);
        assert_eq!(
            p.body[1],
            TacInstr::bin("b1", TacOp::Mul, Operand::var("a"), Operand::var("d"))
        );
    }

    #[test]
    fn errors_have_positions() {
        assert!(
            matches!(parse_tac("func f(a){ return t9 }"), Err(IrError::UseBeforeDef { name, .. }) if name == "t9")
        );
        assert_eq!(
            parse_tac("func f(a){\n  t = a / 2\n  return t }"),
            Err(IrError::UnknownOp {
                op: "/".into(),
                line: 2,
                col: 9
            })
        );
        assert!(matches!(
            parse_tac("func f(a){ t = a + ; return t }"),
            Err(IrError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_tac("func f(a){ t = 0x; return t }"),
            Err(IrError::Syntax { .. })
        ));
        assert!(matches!(
            parse_tac("func f(a){ u = t + 1; return u }"),
            Err(IrError::UseBeforeDef { col: 16, .. })
        ));
    }

    #[test]
    fn comments_unary_and_render_round_trip() {
        let src = "# header\nfunc g(a, b) {\n t = ~a  # not\n u = -t\n v = u ^ 0xdeadbeef; w = v << 3\n return w\n}\n";
        let p = parse_tac(src).unwrap();
        assert_eq!(p.body[0].op, TacOp::Not);
        assert_eq!(p.body[1].op, TacOp::Neg);
        let again = parse_tac(&p.to_string()).unwrap();
        assert_eq!(again, p);
    }
}
