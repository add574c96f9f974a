//! Error-bounded learned compression for 3D spatiotemporal scientific fields.
//!
//! The pipeline quantizes a field into discrete tokens with a Lloyd-Max
//! scalar quantizer, linearizes the grid along a space-filling curve, and
//! asks a predictor (a small decoder-only transformer or a cheap baseline)
//! to rank candidate tokens at every position. Token identity is preserved
//! exactly: positions where the true token falls inside the predictor's
//! top-k are stored as rank symbols, everything else goes to a correction
//! set, and wide quantizer bins carry an extra residual so the pointwise
//! relative error bound holds at every sample regardless of model quality.
//!
//! This crate is `no_std` (with `alloc`) and keeps every numeric path on
//! deterministic soft-float math via `libm`, so archives, checkpoints and
//! decoded token streams are bit-reproducible across platforms. File
//! containers, checkpoint storage and the CLI live in the companion `llmc`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod codec;
pub mod error;
pub mod field;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod quant;

pub use error::{Error, Result};
