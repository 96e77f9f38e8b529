//! Trace-driven simulator for transformer inference on tiled accelerators,
//! comparing two ways of arranging matrices in memory:
//!
//! * **RWMA** (row-wise): plain row-major storage.
//! * **BWMA** (block-wise): `K x K` blocks stored contiguously, sized to the
//!   accelerator's kernel, so every tile load is one sequential burst.
//!
//! [`encoder::run_model`] executes a BERT-style encoder stack end to end on a
//! modeled systolic-array or SIMD accelerator. Every kernel emits its memory
//! accesses into a two-level write-back cache model ([`cache`]), and the run
//! is attributed cycle by cycle to eleven pipeline components, including the
//! layout conversions block-wise storage requires at the model boundary.

pub mod accel;
pub mod cache;
pub mod config;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod kernels;
pub mod layout;
pub mod report;
pub mod trace;
pub mod verify;

pub use error::SimError;
