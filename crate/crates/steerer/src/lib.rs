//! Scale-selective inheritance learning for object counting and localization.
//!
//! The crate trains a small multi-resolution density-map counter in which
//! coarse features are fused upward through attention-gated adaptor blocks,
//! each resolution is supervised only on the image regions it wins under a
//! per-patch cost comparison, and finer resolutions inherit the regions of
//! every coarser one. It ships its own rank-4 tensor engine with reverse-mode
//! differentiation, a deterministic synthetic-scene corpus generator, and
//! counting/localization metrics, so the whole pipeline runs from a single
//! seed with no external dependencies.
//!
//! Start with the runnable programs in `examples/`, or the `steerer` binary
//! (`gen-data`, `train`, `eval`, `predict`, `localize`, `gradcheck`,
//! `diagnose-masks`).

pub mod densitymap;
pub mod error;
pub mod harness;

pub mod metrics;
pub mod model;
pub mod rng;
pub mod steering;
pub mod synth;

pub mod tensor;

pub use error::{Error, ErrorKind, Result};
