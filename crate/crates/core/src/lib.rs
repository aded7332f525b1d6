//! Permutation-invariant matching of feature sets.
//!
//! A set of per-image feature maps is restructured by a residual
//! self-attention stack ([`rsa`]), globally pooled ([`setrep`]) and compared
//! to another set by reconstructing each probe vector from the gallery
//! vectors ([`dfa`]). [`training`] holds the losses and the alternating
//! optimization, [`eval`] the verification/identification metrics.

pub mod cli;
pub mod dataio;
pub mod dfa;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod rsa;
pub mod setrep;
pub mod training;

pub use error::{PifrError, Result};
