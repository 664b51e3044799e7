//! Minimal dense-tensor engine with reverse-mode automatic differentiation.

pub mod adam;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_step_subset, AdamState};
pub use params::{ModelParams, ParamEntry};
pub use tape::Tape;
pub use tensor::{NodeId, Tensor};
