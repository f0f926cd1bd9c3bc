//! Desk-scale laboratory for attention sinks and waiver elements in
//! transformer attention.
//!
//! The crate bundles a small dense tensor kernel, causal and global
//! multi-head attention under editable masks, rotary and learnable
//! positional encodings, a two-preset toy transformer, waiver diagnostics,
//! and a bit-exact capture format shared with external exporters.

pub mod attention;
pub mod capture;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod positional;
pub mod report;
pub mod svg;
pub mod tensor;

pub use error::{Error, Result};
