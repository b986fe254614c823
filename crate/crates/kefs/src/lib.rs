//! Standard-library side of the pipeline: documents, checkpoints, the
//! synthetic benchmark and the end-to-end driver behind the `kefs` binary.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;

pub use error::{KefsError, Result};
