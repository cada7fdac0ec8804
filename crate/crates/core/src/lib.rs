//! Parameter-efficient fine-tuning toolkit for a small decoder-only
//! transformer.

pub mod adapters;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
