//! Keyed-handler virtual-machine obfuscation with synthesized MBA rewriting,
//! plus the automated attacks used to measure it.

pub mod attacks;
pub mod bench;
pub mod expr;
pub mod ir;
pub mod keys;
pub mod obfuscate;
pub mod rewrite;
pub mod rng;
pub mod synth;
pub mod vm;
