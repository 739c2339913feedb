//! Advantage actor-critic training lab.
//!
//! Implements the classic scalarized A2C update together with two
//! modifications: non-overlapping gradient routing (NOG), which confines the
//! value and entropy gradients to their own parameter groups via
//! stop-gradient, and target-entropy sampling (TE), which replaces the
//! entropy bonus with action sampling from an entropy-floored distribution.
//!
//! Everything runs on a purpose-built reverse-mode tape over dense `f64`
//! arrays, so per-parameter-group gradient flow is exact and testable.
//! The crate also ships the surrounding experimental machinery: classic
//! control environments, TPE hyperparameter search with successive-halving
//! pruning, and a multi-seed harness that reports steps-to-solve confidence
//! intervals.

pub mod a2c;
pub mod entropy;
pub mod envs;
pub mod harness;
pub mod hpo;
pub mod nets;
pub mod tape;
