//! JSON description of a handler set: merged expression, keys and slot
//! table per handler. Enough to rebuild the set for execution and for
//! white-box attacks.

use serde::{Deserialize, Serialize};

use super::{CoreSemantics, Handler, HandlerSet, ObfError, Slot};
use crate::expr::{parse_dag, parse_expr};
use crate::keys::{EncodingKind, Factors, KeyEncoding, KeySet};

pub const SIDECAR_FORMAT: &str = "vmobf-handlers/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarFile {
    pub format: String,
    pub exit_handler_id: usize,
    pub handlers: Vec<SidecarHandler>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarHandler {
    pub id: usize,
    pub keys: Vec<u64>,
    /// Merged expression in DAG text form.
    pub merged: String,
    pub slots: Vec<SidecarSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarSlot {
    pub kind: EncodingKind,
    pub encoding: String,
    pub semantics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factors: Option<Factors>,
}

impl HandlerSet {
    pub fn to_sidecar(&self) -> SidecarFile {
        SidecarFile {
            format: SIDECAR_FORMAT.into(),
            exit_handler_id: self.exit_handler_id,
            handlers: self
                .handlers
                .iter()
                .map(|h| SidecarHandler {
                    id: h.id,
                    keys: h.key_set.keys.clone(),
                    merged: h.merged.to_dag_text(),
                    slots: h
                        .slots
                        .iter()
                        .map(|s| SidecarSlot {
                            kind: s.encoding.kind,
                            encoding: s.encoding.expr.to_string(),
                            semantics: s.sem.expr.to_dag_text(),
                            factors: s.encoding.factors,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn from_sidecar(f: &SidecarFile) -> Result<HandlerSet, ObfError> {
        let bad = |m: String| ObfError::Sidecar(m);
        if f.format != SIDECAR_FORMAT {
            return Err(bad(format!("unknown format {:?}", f.format)));
        }
        let mut handlers = Vec::with_capacity(f.handlers.len());
        for (i, h) in f.handlers.iter().enumerate() {
            if h.id != i || h.keys.len() != h.slots.len() {
                return Err(bad(format!("handler {i} is inconsistent")));
            }
            let merged = parse_dag(&h.merged).map_err(|e| bad(format!("handler {i}: {e}")))?;
            let mut slots = Vec::with_capacity(h.slots.len());
            for (j, s) in h.slots.iter().enumerate() {
                let expr = parse_expr(&s.encoding)
                    .map_err(|e| bad(format!("handler {i} slot {j}: {e}")))?;
                let sem = parse_dag(&s.semantics)
                    .map_err(|e| bad(format!("handler {i} slot {j}: {e}")))?;
                let encoding = KeyEncoding {
                    kind: s.kind,
                    expr,
                    index: j,
                    factors: s.factors,
                };
                slots.push(Slot {
                    encoding,
                    sem: CoreSemantics::new(sem),
                });
            }
            handlers.push(Handler::new(
                i,
                KeySet {
                    keys: h.keys.clone(),
                },
                slots,
                merged,
            ));
        }
        if f.exit_handler_id != handlers.len() {
            return Err(bad("exit handler id must follow the last handler".into()));
        }
        Ok(HandlerSet::new(handlers))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_sidecar()).expect("sidecar serializes")
    }

    pub fn from_json(s: &str) -> Result<HandlerSet, ObfError> {
        let f: SidecarFile =
            serde_json::from_str(s).map_err(|e| ObfError::Sidecar(e.to_string()))?;
        HandlerSet::from_sidecar(&f)
    }
}
