//! Deterministic numeric core: raw kernels, a reverse-mode tape, and Adam.
//!
//! All reductions run sequentially over ascending indices, and the tape ops
//! call the same kernels as the plain (gradient-free) inference path, so the
//! two produce bit-identical floats on identical inputs.

pub mod adam;
pub mod kernels;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{finite_diff_grad, NumError, Tape, Tensor, Var};
