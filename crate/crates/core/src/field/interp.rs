//! Trilinear sampling, backward warping and field composition.
//!
//! All sampling clamps to the grid edge. Positions are handled in index space
//! so that a zero displacement lands exactly on the voxel node.

use super::grid::{DisplacementField, Grid, Mask, Vec3, Volume};
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AxisCell {
    pub base: usize,
    pub frac: f64,
    pub clamped: bool,
}

#[inline]
pub(crate) fn locate(x: f64, n: usize) -> AxisCell {
    let hi = (n - 1) as f64;
    let clamped = !(0.0..=hi).contains(&x);
    let xc = x.clamp(0.0, hi);
    let base = (xc.floor() as usize).min(n - 2);
    AxisCell {
        base,
        frac: xc - base as f64,
        clamped,
    }
}

#[inline]
pub(crate) fn cells(dims: [usize; 3], p: Vec3) -> [AxisCell; 3] {
    [
        locate(p[0], dims[0]),
        locate(p[1], dims[1]),
        locate(p[2], dims[2]),
    ]
}

#[inline]
fn corner_index(dims: [usize; 3], c: &[AxisCell; 3], dx: usize, dy: usize, dz: usize) -> usize {
    (c[0].base + dx) + dims[0] * ((c[1].base + dy) + dims[1] * (c[2].base + dz))
}

/// Trilinear interpolation at continuous index coordinates.
#[inline]
pub(crate) fn sample_index(values: &[f64], dims: [usize; 3], p: Vec3) -> f64 {
    let c = cells(dims, p);
    let [tx, ty, tz] = [c[0].frac, c[1].frac, c[2].frac];
    let v = |dx, dy, dz| values[corner_index(dims, &c, dx, dy, dz)];
    let c00 = v(0, 0, 0) * (1.0 - tx) + v(1, 0, 0) * tx;
    let c10 = v(0, 1, 0) * (1.0 - tx) + v(1, 1, 0) * tx;
    let c01 = v(0, 0, 1) * (1.0 - tx) + v(1, 0, 1) * tx;
    let c11 = v(0, 1, 1) * (1.0 - tx) + v(1, 1, 1) * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

/// Value and gradient with respect to index coordinates. The gradient is zero
/// along axes where the point was clamped.
#[inline]
pub(crate) fn sample_index_grad(values: &[f64], dims: [usize; 3], p: Vec3) -> (f64, Vec3) {
    let c = cells(dims, p);
    let [tx, ty, tz] = [c[0].frac, c[1].frac, c[2].frac];
    let v = |dx, dy, dz| values[corner_index(dims, &c, dx, dy, dz)];
    let (v000, v100, v010, v110) = (v(0, 0, 0), v(1, 0, 0), v(0, 1, 0), v(1, 1, 0));
    let (v001, v101, v011, v111) = (v(0, 0, 1), v(1, 0, 1), v(0, 1, 1), v(1, 1, 1));

    let c00 = v000 * (1.0 - tx) + v100 * tx;
    let c10 = v010 * (1.0 - tx) + v110 * tx;
    let c01 = v001 * (1.0 - tx) + v101 * tx;
    let c11 = v011 * (1.0 - tx) + v111 * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    let value = c0 * (1.0 - tz) + c1 * tz;

    let mut g = [0.0; 3];
    if !c[0].clamped {
        let d00 = v100 - v000;
        let d10 = v110 - v010;
        let d01 = v101 - v001;
        let d11 = v111 - v011;
        let d0 = d00 * (1.0 - ty) + d10 * ty;
        let d1 = d01 * (1.0 - ty) + d11 * ty;
        g[0] = d0 * (1.0 - tz) + d1 * tz;
    }
    if !c[1].clamped {
        g[1] = (c10 - c00) * (1.0 - tz) + (c11 - c01) * tz;
    }
    if !c[2].clamped {
        g[2] = c1 - c0;
    }
    (value, g)
}

/// Adds `w · ∂sample/∂values` into `acc` (the adjoint of sampling).
#[inline]
pub(crate) fn scatter_index(acc: &mut [f64], dims: [usize; 3], p: Vec3, w: f64) {
    let c = cells(dims, p);
    let [tx, ty, tz] = [c[0].frac, c[1].frac, c[2].frac];
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                acc[corner_index(dims, &c, dx, dy, dz)] += w * wx * wy * wz;
            }
        }
    }
}

/// Index-space sampling position of voxel `idx` displaced by `u` (mm).
#[inline]
pub(crate) fn displaced_index(grid: &Grid, idx: usize, u: Vec3) -> Vec3 {
    let [i, j, k] = grid.coords(idx);
    [
        i as f64 + u[0] / grid.spacing[0],
        j as f64 + u[1] / grid.spacing[1],
        k as f64 + u[2] / grid.spacing[2],
    ]
}

/// Trilinear interpolation at a world point, clamped to the grid.
pub fn trilinear_sample(vol: &Volume, p: Vec3) -> Result<f64> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("sample point {p:?}")));
    }
    Ok(sample_index(
        &vol.values,
        vol.grid.dims,
        vol.grid.to_index(p),
    ))
}

/// Backward (pull) warp: `out(x) = vol(x + dvf(x))`.
pub fn warp_volume(vol: &Volume, dvf: &DisplacementField) -> Result<Volume> {
    vol.grid.ensure_same(&dvf.grid)?;
    Ok(Volume {
        grid: vol.grid,
        values: warp_values(&vol.values, &dvf.grid, &dvf.vectors),
        frame: Some(dvf.to_frame),
    })
}

pub(crate) fn warp_values(values: &[f64], grid: &Grid, vectors: &[Vec3]) -> Vec<f64> {
    let dims = grid.dims;
    par::map_indices(grid.len(), |idx| {
        sample_index(values, dims, displaced_index(grid, idx, vectors[idx]))
    })
}

/// Warps a binary mask as a real image and re-binarises at `threshold`.
pub fn warp_mask(mask: &Mask, dvf: &DisplacementField, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let warped = warp_volume(&mask.to_volume(), dvf)?;
    Ok(Mask {
        grid: mask.grid,
        labels: warped
            .values
            .iter()
            .map(|&v| (v >= threshold) as u8)
            .collect(),
    })
}

/// `result(x) = inner(x) + outer(x + inner(x))`: apply `inner`, then `outer`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer.grid.ensure_same(&inner.grid)?;
    let grid = inner.grid;
    let channels: [Vec<f64>; 3] = [outer.component(0), outer.component(1), outer.component(2)];
    let vectors = par::map_indices(grid.len(), |idx| {
        let u = inner.vectors[idx];
        let p = displaced_index(&grid, idx, u);
        [
            u[0] + sample_index(&channels[0], grid.dims, p),
            u[1] + sample_index(&channels[1], grid.dims, p),
            u[2] + sample_index(&channels[2], grid.dims, p),
        ]
    });
    Ok(DisplacementField::from_parts(
        grid,
        vectors,
        outer.from_frame,
        inner.to_frame,
    ))
}
