//! Joint crowd counting, head localization and motion association.
//!
//! The crate is `no_std` and only needs `alloc`. It carries the pure numeric
//! parts of the pipeline: a small reverse-mode autodiff engine, ground-truth
//! construction, the three training losses, the toy two-frame network and its
//! trainer, a min-cost-flow linker and the evaluation protocol. File formats,
//! configuration and the command line live in the `crowdtrack` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod association;
pub mod density;
mod error;
pub mod geometry;
pub mod localization;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tracking;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
