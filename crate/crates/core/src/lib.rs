//! Dense 4D displacement-field estimation for cardiac cine volumes.
//!
//! The crate covers the numerical field substrate, a small reverse-mode
//! differentiation engine, classical band-limited registration, a conditional
//! VAE motion model with masked-autoencoder conditioning, evaluation metrics
//! and meshes, a synthetic phantom generator and the on-disk formats.

// Index loops mirror the tensor formulas, and `!(x > 0.0)` rejects NaN too.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod motion;
pub mod phantom;
pub mod registration;

mod par;

pub use error::{Error, Result};
