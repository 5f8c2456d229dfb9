//! Dense f64 tensors, a reverse-mode tape, and AdamW.

mod adamw;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use graph::{Graph, Var};
pub(crate) use graph::pairwise_sum;
pub use params::{Param, ParamId, ParamRegistry, Session};
pub use tensor::{cosine, Tensor};
