//! Fuzzy multi-granular network, core math.
//!
//! Everything here is pure computation on heap tensors: the autodiff tape,
//! fuzzy membership maps, the granular encoder-decoder, cross-attention
//! blocks, the assembled model, and classification metrics. No IO, no OS
//! dependencies; the companion crate adds file formats and the CLI.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod fca;
pub mod fuzzy;
pub mod graph;
pub mod granular;
pub mod metrics;
pub mod model;
pub mod num;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use fca::MlpMode;
pub use graph::{Graph, Grads, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
