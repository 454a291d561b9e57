//! Minimal reverse-mode automatic differentiation over dense `f64` vectors.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use params::{AdamConfig, AdamState, Gradients, Param, ParamId, ParameterStore};
pub use tape::{Backward, Tape, Var};

pub(crate) use tape::softplus;
