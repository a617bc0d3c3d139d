//! Small reverse-mode differentiation engine over `[batch, channels, time]` arrays.

pub mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Unary, Var};
pub use kernels::{ConvSpec, StftPlan};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
