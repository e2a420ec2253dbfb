//! Multi-source domain adaptation for cross-subject EEG emotion
//! classification: differential-entropy features, a CNN + transformer
//! feature generator, correlation-based source grouping and moment-matching
//! adaptation with classifier pairs.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod features;
pub mod generator;
pub mod grouping;
pub mod harness;
pub mod msda;
pub mod numerics;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
