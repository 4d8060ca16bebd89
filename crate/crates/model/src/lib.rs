//! Shared substrate for the tape-machine inference pipeline: deterministic
//! fixed-point arithmetic, BPE vocabulary handling, model specifications, and
//! the word-class lexicon used by the centre-embedding scenarios.
//!
//! Everything in this crate is integer-deterministic: two runs on any
//! platform produce bit-identical results.

pub mod grammar;
pub mod numerics;
pub mod rng;
pub mod spec;
pub mod vocab;

pub use numerics::{FixedPoint, FxpCtx, ProbRow};
pub use spec::ModelSpec;
pub use vocab::{MergeRule, Regime, Vocabulary};
