//! Desk-scale laboratory for group-relative policy optimization.
//!
//! The policy is an autoregressive feature-softmax over a 15-token alphabet,
//! small enough that every expectation can be enumerated exactly. On top of
//! it the crate implements GRPO and its Dr.GRPO, DAPO and GSPO variants,
//! bilateral context conditioning (scoring each output after the opposite
//! partition of its group), and the reward-confidence corrected advantage
//! `r - mean(r) - 2 Cov(r, delta)`.

// `!(x > 0.0)` is used on purpose so NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod math;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rollout;
pub mod seed;
pub mod tokens;
pub mod trainer;
pub mod verify;

pub use error::{LabError, Result};
