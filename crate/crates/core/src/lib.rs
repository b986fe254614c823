//! Knowledge-enhanced feature synthesis for zero-shot detection.
//!
//! The crate is `no_std` (with `alloc`) and purely computational: it builds
//! multi-source class-correlation graphs, embeds class semantics with graph
//! convolutions, fuses them with attention into knowledge representations,
//! trains a conditional diffusion generator of 1-D region features, and scores
//! classification and detection outputs. File formats, configuration files and
//! the command line live in the companion `kefs` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gcn;
pub mod gradcheck;
pub mod graphs;
pub mod linalg;
pub mod msgf;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rfdm;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
