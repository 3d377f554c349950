//! One-stage multiple human parsing on synthetic scenes.
//!
//! A query-based parser predicts, for every person query, a box, a score and
//! dynamic kernels that turn shared pixel features into per-part masks.
//! [`cfs`] splits each part representation into a content factor pooled
//! inside the part and a context factor pooled around it; [`losses`] adds a
//! diversity term that keeps the two apart and an invariance term that asks
//! content to survive style interventions. [`synth`] renders the scenes and
//! the interventions, [`metrics`] scores parses, and [`harness`] trains,
//! evaluates and runs the comparison protocols.
//!
//! The runnable examples under `examples/` walk through each piece.

pub mod cfs;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parser;
pub mod synth;
pub mod targets;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
