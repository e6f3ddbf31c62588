//! Dense reverse-mode automatic differentiation over `f64` matrices, with an
//! AdamW optimizer and a compact checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
mod params;
pub mod rng;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Axis, Graph, NodeGrads, Var};
pub use optim::{adamw_step, AdamW, AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
