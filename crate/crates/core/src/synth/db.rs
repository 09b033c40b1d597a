//! The equivalence-class database and its text file format.
//!
//! ```text
//! #grammar <hash>
//! #depth <N>
//! #seed <s>
//! #vectors <count>
//! #classes <count>
//! #members <count>
//! SIG <hex digest> REP <canonical expr>
//! MEM <canonical expr>      verified member
//! UNV <canonical expr>      member that failed or skipped verification
//! #end
//! ```
//! Files whose name ends in `.gz` are gzip-wrapped; `load_db` detects the
//! gzip magic regardless of name.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use thiserror::Error;

use super::{eval_vectors, signature, SynthGrammar};
use crate::expr::{parse_expr, prove_equiv, Expr};

#[derive(Debug, Error)]
pub enum DbError {
    #[error("malformed database at line {line}: {msg}")]
    FormatError { line: usize, msg: String },
    #[error("grammar hash {found} does not match the current grammar {expected}")]
    GrammarMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub expr: Expr,
    pub verified: bool,
}

/// One class. `members[0]` is the representative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRecord {
    pub signature: u128,
    pub representative: Expr,
    pub members: Vec<Member>,
}

impl ClassRecord {
    pub fn verified_members(&self) -> impl Iterator<Item = &Expr> {
        self.members.iter().filter(|m| m.verified).map(|m| &m.expr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbMeta {
    pub grammar_hash: String,
    pub grammar: SynthGrammar,
    pub max_depth: usize,
    pub seed: u64,
    pub vectors: usize,
}

#[derive(Debug, Clone)]
pub struct EquivClassDb {
    meta: DbMeta,
    classes: Vec<ClassRecord>,
    index: HashMap<u128, Vec<usize>>,
    xs: Vec<u64>,
    ys: Vec<u64>,
}

impl PartialEq for EquivClassDb {
    fn eq(&self, o: &Self) -> bool {
        self.meta == o.meta && self.classes == o.classes
    }
}

impl EquivClassDb {
    pub fn new(meta: DbMeta, classes: Vec<ClassRecord>) -> Self {
        let mut index: HashMap<u128, Vec<usize>> = HashMap::new();
        for (i, c) in classes.iter().enumerate() {
            index.entry(c.signature).or_default().push(i);
        }
        let (xs, ys) = eval_vectors(meta.vectors, meta.seed);
        EquivClassDb {
            meta,
            classes,
            index,
            xs,
            ys,
        }
    }

    pub fn meta(&self) -> &DbMeta {
        &self.meta
    }
    pub fn classes(&self) -> &[ClassRecord] {
        &self.classes
    }
    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
    pub fn member_count(&self) -> usize {
        self.classes.iter().map(|c| c.members.len()).sum()
    }
    /// Classes with at least two members (usable for rewriting).
    pub fn nontrivial_class_count(&self) -> usize {
        self.classes.iter().filter(|c| c.members.len() > 1).count()
    }

    pub fn signature_of(&self, e: &Expr) -> u128 {
        signature(e, &self.xs, &self.ys)
    }

    /// Class whose signature matches `e` and whose representative is
    /// confirmed equivalent. `e` must only use `x` and `y`.
    pub fn lookup_class(&self, e: &Expr) -> Option<&ClassRecord> {
        let sig = self.signature_of(e);
        self.index
            .get(&sig)?
            .iter()
            .map(|&i| &self.classes[i])
            .find(|c| prove_equiv(&c.representative, e, 1000, 0x5eed).is_equivalent())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.meta;
        s.push_str(&format!(
            "#grammar {}\n#depth {}\n#seed {}\n#vectors {}\n#classes {}\n#members {}\n",
            m.grammar_hash,
            m.max_depth,
            m.seed,
            m.vectors,
            self.classes.len(),
            self.member_count()
        ));
        for c in &self.classes {
            s.push_str(&format!(
                "SIG {:032x} REP {}\n",
                c.signature, c.representative
            ));
            for mem in &c.members[1..] {
                s.push_str(if mem.verified { "MEM " } else { "UNV " });
                s.push_str(&mem.expr.to_string());
                s.push('\n');
            }
        }
        s.push_str("#end\n");
        s
    }

    /// Parse the text form, checking the grammar hash against `grammar`.
    pub fn from_text(text: &str, grammar: &SynthGrammar) -> Result<Self, DbError> {
        let fe = |line: usize, msg: &str| DbError::FormatError {
            line,
            msg: msg.to_string(),
        };
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut classes: Vec<ClassRecord> = Vec::new();
        let mut ended = false;
        for (n, line) in text.lines().enumerate() {
            let ln = n + 1;
            if ended {
                return Err(fe(ln, "content after #end"));
            }
            if line == "#end" {
                ended = true;
            } else if let Some(h) = line.strip_prefix('#') {
                let (k, v) = h.split_once(' ').ok_or_else(|| fe(ln, "bad header"))?;
                header.insert(k, v);
            } else if let Some(rest) = line.strip_prefix("SIG ") {
                let (sig, rep) = rest
                    .split_once(" REP ")
                    .ok_or_else(|| fe(ln, "missing REP"))?;
                let signature =
                    u128::from_str_radix(sig, 16).map_err(|_| fe(ln, "bad signature"))?;
                let representative = parse_expr(rep).map_err(|e| fe(ln, &e.to_string()))?;
                classes.push(ClassRecord {
                    signature,
                    representative: representative.clone(),
                    members: vec![Member {
                        expr: representative,
                        verified: true,
                    }],
                });
            } else if let Some((tag, body)) = line.split_once(' ') {
                let verified = match tag {
                    "MEM" => true,
                    "UNV" => false,
                    _ => return Err(fe(ln, "unknown record")),
                };
                let expr = parse_expr(body).map_err(|e| fe(ln, &e.to_string()))?;
                classes
                    .last_mut()
                    .ok_or_else(|| fe(ln, "member before class"))?
                    .members
                    .push(Member { expr, verified });
            } else {
                return Err(fe(ln, "unknown record"));
            }
        }
        let last = text.lines().count();
        if !ended {
            return Err(fe(last, "missing #end (truncated file)"));
        }
        let get = |k: &str| {
            header
                .get(k)
                .copied()
                .ok_or_else(|| fe(0, &format!("missing #{k}")))
        };
        let num = |k: &str| -> Result<u64, DbError> {
            get(k)?.parse().map_err(|_| fe(0, &format!("bad #{k}")))
        };
        let found = get("grammar")?.to_string();
        let expected = grammar.hash();
        if found != expected {
            return Err(DbError::GrammarMismatch { expected, found });
        }
        let meta = DbMeta {
            grammar_hash: found,
            grammar: grammar.clone(),
            max_depth: num("depth")? as usize,
            seed: num("seed")?,
            vectors: num("vectors")? as usize,
        };
        let db = EquivClassDb::new(meta, classes);
        if num("classes")? as usize != db.classes.len()
            || num("members")? as usize != db.member_count()
        {
            return Err(fe(last, "record counts do not match header"));
        }
        Ok(db)
    }
}

pub fn store_db(db: &EquivClassDb, path: &Path) -> Result<(), DbError> {
    let text = db.to_text();
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(std::fs::File::create(path)?, flate2::Compression::default());
        enc.write_all(text.as_bytes())?;
        enc.finish()?;
    } else {
        std::fs::write(path, text)?;
    }
    Ok(())
}

/// Load a DB built for the default grammar.
pub fn load_db(path: &Path) -> Result<EquivClassDb, DbError> {
    load_db_with(path, &SynthGrammar::default())
}

pub fn load_db_with(path: &Path, grammar: &SynthGrammar) -> Result<EquivClassDb, DbError> {
    let raw = std::fs::read(path)?;
    let text = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut s = String::new();
        GzDecoder::new(&raw[..])
            .read_to_string(&mut s)
            .map_err(|e| DbError::FormatError {
                line: 0,
                msg: format!("bad gzip stream: {e}"),
            })?;
        s
    } else {
        String::from_utf8(raw).map_err(|_| DbError::FormatError {
            line: 0,
            msg: "not UTF-8".into(),
        })?
    };
    EquivClassDb::from_text(&text, grammar)
}
