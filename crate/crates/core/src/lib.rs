//! Simultaneous translation with a decoder-only language model: attention
//! masks that mirror streaming inference, ALiBi positional biases re-indexed
//! over visible keys, a position-free KV cache, and the metrics used to
//! compare cached and recomputing decoders.

pub mod alibi;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod par;
pub mod policy;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
