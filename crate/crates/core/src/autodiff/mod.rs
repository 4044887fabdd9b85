//! Reverse-mode automatic differentiation over dense f64 tensors.

mod adam;
mod gradcheck;
pub mod init;
mod suite;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use suite::{gradient_suite, SuiteEntry, SMOOTH_TOLERANCE, WARP_TOLERANCE};
pub use tape::{forward, Gradients, Tape, Var};
pub use tensor::{GradSet, ParamSet, Tensor};

pub(crate) use tape::kl_value;
