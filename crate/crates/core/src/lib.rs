//! Decoupled human/context/interaction modeling for domain adaptive action
//! recognition, on feature-level inputs.
//!
//! The crate bundles:
//!
//! - a minimal reverse-mode differentiation engine ([`diff`]),
//! - spatial masking of feature maps into human and context sets ([`masking`]),
//! - the model: human encoder, context encoder with prototype tokens, and a
//!   query-based human-context decoder ([`human_encoder`], [`context_encoder`],
//!   [`hc_decoder`], [`prototypes`]),
//! - adversarial two-stage training with gradient reversal ([`training`]),
//! - a deterministic synthetic benchmark that plants a human-recoverable
//!   signal and a context correlation that flips between domains
//!   ([`synthbench`]),
//! - evaluation metrics: accuracy, gradient-times-input attribution, human
//!   ratio, Davies-Bouldin index ([`evalsuite`]).

pub mod array;
pub mod context_encoder;
pub mod diff;
pub mod error;
pub mod evalsuite;
pub mod hc_decoder;
pub mod human_encoder;
pub mod masking;
pub mod nn;
pub mod prototypes;
pub mod streams;
pub mod synthbench;
pub mod training;

pub use array::Array;
pub use error::{HctError, Result};
