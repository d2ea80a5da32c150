//! Geometric two-qubit gates on trapped-ion crystals driven by spin-dependent
//! forces, with pair-bit decoherence-free encoding and collective dephasing.
//!
//! Units: `ħ = m = 1`. Basis ordering: qubit 0 is the fastest index, followed
//! by the phonon modes in ascending frequency order.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoherence;
pub mod dfs;
pub mod exec;
pub mod linalg;
pub mod modes;
pub mod oracle;
pub mod pulse;
pub mod quadrature;

pub use exec::Execution;
