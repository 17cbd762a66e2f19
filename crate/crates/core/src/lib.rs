//! Mixed-precision post-training quantization planner for a toy vision transformer.

pub mod allocator;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod importance;
pub mod io;
pub mod model;
pub mod nn;
pub mod par;
pub mod profiler;
pub mod quant;
pub mod spec;
pub mod synergy;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
