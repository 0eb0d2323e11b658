//! Reverse-mode automatic differentiation over a per-pass tape.

pub(crate) mod kernels;
mod ops;
mod tape;

pub use tape::{Tape, Var};
