//! The obfuscation pipeline: SSA, superoperators, keyed handlers, bytecode.

mod emit;
mod handlers;
mod sidecar;
mod superops;

use thiserror::Error;

pub use emit::emit_bytecode;
pub use handlers::{
    build_handler, build_handlers, merge_slots, random_semantics, Handler, HandlerSet, Slot,
};
pub use sidecar::{SidecarFile, SidecarHandler, SidecarSlot, SIDECAR_FORMAT};
pub use superops::{build_superoperators, CoreSemantics, Residual, SuperStep};

use crate::ir::{to_ssa, IrError, TacProgram};
use crate::keys::{EncodingKind, KeyError};
use crate::rewrite::{RewriteConfig, RewriteError, Rewriter};
use crate::rng::{derive, rng};
use crate::vm::BytecodeProgram;

#[derive(Debug, Error)]
pub enum ObfError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("superoperator for {0} does not match its instructions")]
    SuperoperatorMismatch(String),
    #[error("handler {handler} slot {slot} disagrees with its semantics at {input:?}")]
    SlotMismatch {
        handler: usize,
        slot: usize,
        input: (u64, u64, u64),
    },
    #[error("no handler implements {0}")]
    UnmappedSemantics(String),
    #[error("program needs {0} registers (max 256)")]
    TooManyRegisters(usize),
    #[error("MBA rewriting requested without a class database")]
    MissingRewriter,
    #[error("bad handler sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscationConfig {
    /// Per-root inlining budget range; `(0, 0)` disables superoperators.
    pub superop_bounds: (usize, usize),
    pub handler_count: usize,
    pub slots_per_handler: (usize, usize),
    /// `None` disables MBA rewriting.
    pub rewrite: Option<RewriteConfig>,
    pub prime_bits: u32,
    pub pf_max_ops: usize,
    pub pf_cap: usize,
    /// Force one encoding kind for every slot; `None` picks uniformly.
    pub key_kind: Option<EncodingKind>,
    pub seed: u64,
}

impl Default for ObfuscationConfig {
    fn default() -> Self {
        ObfuscationConfig {
            superop_bounds: (3, 12),
            handler_count: 64,
            slots_per_handler: (3, 5),
            rewrite: Some(RewriteConfig::default()),
            prime_bits: 16,
            pf_max_ops: 15,
            pf_cap: 1_000_000,
            key_kind: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Obfuscated {
    pub bytecode: BytecodeProgram,
    pub handlers: HandlerSet,
    pub residual: Residual,
}

pub fn obfuscate(
    p: &TacProgram,
    rewriter: Option<&Rewriter>,
    cfg: &ObfuscationConfig,
) -> Result<Obfuscated, ObfError> {
    p.validate()?;
    if cfg.rewrite.is_some() && rewriter.is_none() {
        return Err(ObfError::MissingRewriter);
    }
    let ssa = to_ssa(p);
    let residual = build_superoperators(&ssa, cfg.superop_bounds, &mut rng(derive(cfg.seed, 1)))?;
    let sems: Vec<CoreSemantics> = residual.semantics().cloned().collect();
    let handlers = build_handlers(&sems, rewriter, cfg, &mut rng(derive(cfg.seed, 2)))?;
    let bytecode = emit_bytecode(&residual, &handlers, &mut rng(derive(cfg.seed, 3)))?;
    Ok(Obfuscated {
        bytecode,
        handlers,
        residual,
    })
}
