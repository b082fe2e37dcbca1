//! Graph-to-graph compression passes.

pub mod bnfold;
pub mod mtz;
pub mod quant;
pub mod vib;
