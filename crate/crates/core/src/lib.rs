//! Long-range dialogue context modeling.
//!
//! A hierarchical encoder scores how relevant every past utterance is to the
//! upcoming response; a composer turns those scores into a compact decoder
//! context (top-k relevant turns plus the most recent ones, prefixed by a
//! learned summary vector); a small causal language model generates the
//! response from that context.

pub mod beam;
pub mod checkpoint;
pub mod composer;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Rng, Tensor};
