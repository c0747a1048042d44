//! Multi-turn inference matching network (MIMN) for natural language
//! inference, built on a small reverse-mode autodiff engine.
//!
//! Pipeline: [`data`] turns corpora into padded batches, [`model`] runs
//! encode → align → match → multi-turn inference → classify on a
//! [`tensor::Graph`], [`train`] optimizes and persists parameters, and
//! [`verify`] holds the independent oracles (finite differences, a
//! straight-line forward pass, and the parameter counter).

pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
