//! Dual-pathway image-prompt adapter diffusion at toy scale.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod image;
pub mod losses;
pub mod mask;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod schedule;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
