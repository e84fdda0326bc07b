//! Dense tensors, a reverse-mode tape, and the AdamW optimizer.
//!
//! Every model computation is built from the operations on [`Graph`].
//! Values are `f64`; checkpoints store `f32`.

mod graph;
pub mod linalg;
mod optim;
mod params;
mod tensor;

pub use graph::{Axis, Graph, Var};
pub use optim::{AdamState, AdamW};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
