//! Minimal reverse-mode differentiable layer: tensors, a dynamic tape, the
//! handful of ops the filter networks need, Adam, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod linalg;
mod ops;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use layers::{Bound, Conv2d, LayerNorm, Linear, LstmCell, RecurrentCellState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
