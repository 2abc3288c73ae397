//! Video semantic aggregation for skill-score regression.
//!
//! The crate is `no_std` (with `alloc`): it holds the numeric substrate, the
//! model, the synthetic benchmark generator, metrics and the training loop.
//! File formats and the command-line driver live in the `visa` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod fem;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod model;
pub mod optim;
pub mod params;
pub mod seed;
pub mod sgm;
pub mod synth;
pub mod tcmm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
