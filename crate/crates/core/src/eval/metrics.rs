use crate::error::{Error, Result};
use crate::field::Mask;
use crate::par;

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    a.grid.ensure_same(&b.grid)?;
    let inter = a
        .labels
        .iter()
        .zip(&b.labels)
        .filter(|(x, y)| **x != 0 && **y != 0)
        .count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Distances in mm from every boundary voxel of `from` to the nearest
/// boundary voxel of `to`.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    par::map_indices(from.len(), |i| {
        let p = from[i];
        let mut best = f64::INFINITY;
        for q in to {
            let mut d2 = 0.0;
            for a in 0..3 {
                let d = (p[a] as f64 - q[a] as f64) * spacing[a];
                d2 += d * d;
            }
            if d2 < best {
                best = d2;
            }
        }
        best.sqrt()
    })
}

/// Both directed boundary-distance sets, `(a→b, b→a)`.
pub fn surface_distances(a: &Mask, b: &Mask) -> Result<(Vec<f64>, Vec<f64>)> {
    a.grid.ensure_same(&b.grid)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask(
            "surface distance needs two nonempty masks".into(),
        ));
    }
    let (ba, bb) = (a.boundary_voxels(), b.boundary_voxels());
    let s = a.grid.spacing;
    Ok((directed(&ba, &bb, s), directed(&bb, &ba, s)))
}

/// Linear-interpolation percentile of unsorted data, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|x, y| x.total_cmp(y));
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Symmetric Hausdorff distance between mask surfaces in mm.
///
/// `percentile = 100` gives the classical maximum; lower values take the
/// larger of the two directed percentiles (so 95 gives HD95).
pub fn hausdorff_mm(a: &Mask, b: &Mask, percentile_p: f64) -> Result<f64> {
    if !(percentile_p > 0.0 && percentile_p <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in (0, 100], got {percentile_p}"
        )));
    }
    let (ab, ba) = surface_distances(a, b)?;
    Ok(percentile(&ab, percentile_p).max(percentile(&ba, percentile_p)))
}

/// Mean over both directed boundary-distance sets, in mm.
pub fn mean_surface_distance(a: &Mask, b: &Mask) -> Result<f64> {
    let (ab, ba) = surface_distances(a, b)?;
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64)
}
