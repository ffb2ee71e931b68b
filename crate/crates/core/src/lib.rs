//! Expectation-maximization self-training for small sequence policies.
//!
//! The loop is: sample outputs from the current policy ([`estep`]), keep and
//! weight them by reward, fine-tune a fresh copy of the base checkpoint on the
//! result ([`mstep`]), and repeat ([`emloop`]). Exact EM on enumerable
//! instances, ablations and evaluation ([`eval`]) are built on the same parts.

pub mod emloop;
pub mod error;
pub mod estep;
pub mod eval;
pub mod io;
pub mod mstep;
pub mod rng;
pub mod seqpolicy;
pub mod tasks;

pub use error::{Error, Result};
