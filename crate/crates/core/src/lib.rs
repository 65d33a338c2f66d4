//! Contextual-circuit analysis of GPT-2-Small's first layer.
//!
//! The crate loads first-layer weights, folds the LayerNorms, and then
//! decomposes attention into a positional kernel times per-token content
//! factors. From that decomposition it measures how stable the softmax
//! denominators are, builds a vocabulary-wide contribution table for every
//! MLP neuron from one calibration text, mines the table for
//! context-sensitive neurons and checks each approximation against an exact
//! forward pass ([`reference`]).

pub mod artifact;
pub mod checkpoint;
pub mod circuit;
pub mod decomp;
pub mod discovery;
pub mod error;
pub mod numeric;
pub mod reference;
pub mod stability;
pub mod synthetic;
pub mod tokens;
pub mod validate;

pub use error::{Error, Result};
