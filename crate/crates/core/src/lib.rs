//! Sequence-context egocentric action recognition over pre-extracted
//! features: a transformer sequence encoder with verb/noun classification
//! tokens, masked visual-text sequence reconstruction, and cross-domain
//! sequence mixing, plus a synthetic multi-domain benchmark.

pub mod data;
pub mod eval;
pub mod model;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;
