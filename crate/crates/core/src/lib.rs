//! Desk-scale laboratory for sparse mixture-of-experts training.
//!
//! A dense transformer MLP is split into `N` equal experts, tokens are routed
//! by a randomly initialized and frozen gate with top-`k` selection, and `k`
//! grows linearly over training. The crate also carries the comparison
//! methods (dense dropout variants, a learnable router with a balancing loss,
//! random-pair routing with a consistency loss), a byte-level training loop,
//! and the post-training analyses: `k` sweeps, expert voting, analytic FLOPs,
//! and single-expert distillation.
//!
//! Run `cargo run --example <name>` for a tour; see the `examples/` directory.

pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
