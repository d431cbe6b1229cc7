//! Reverse-mode differentiation over small dense matrices, plus the Adam
//! optimizer. Everything the model layers need and nothing more.

mod adam;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{xavier_init, Scalar, Tensor};
