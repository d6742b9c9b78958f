//! Minimal dense tensor toolkit: parameter storage, a differentiable graph, and Adam.

mod graph;
mod optim;
mod params;

pub use graph::{Gradients, Graph, Mat, NodeId, RowMix, Support, Targets};
pub use optim::Adam;
pub use params::{NamedTensor, ParamId, ParamStore, TensorArchive};
