//! Grids, volumes, displacement fields and the numerical operations on them.

mod bandlimited;
mod diff;
mod grid;
mod interp;

pub use bandlimited::{project_bandlimited, synthesize_bandlimited, BandlimitedDVF, SynthBasis};
pub use diff::{smoothness_gradient, smoothness_loss, spatial_jacobian};
pub use grid::{norm3, DisplacementField, Grid, JacobianField, Mask, Mat3, Vec3, Volume};
pub use interp::{compose, trilinear_sample, warp_mask, warp_volume};

pub(crate) use bandlimited::{check_cutoff, fit_cutoff};
pub(crate) use diff::{smoothness_channels, smoothness_channels_grad};
pub(crate) use interp::{cells, displaced_index, sample_index, sample_index_grad, scatter_index};
