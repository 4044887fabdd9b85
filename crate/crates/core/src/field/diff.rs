//! Finite-difference derivatives of displacement fields and the smoothness
//! penalty built on them.

use super::grid::{DisplacementField, Grid, JacobianField};

/// Derivative of a scalar channel along `axis` (per mm): central differences in
/// the interior, one-sided at the two ends of every line.
pub(crate) fn diff_axis(values: &[f64], dims: [usize; 3], axis: usize, spacing: f64) -> Vec<f64> {
    let n = dims[axis];
    let stride = axis_stride(dims, axis);
    let mut out = vec![0.0; values.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = (idx / stride) % n;
        *o = if pos == 0 {
            (values[idx + stride] - values[idx]) / spacing
        } else if pos == n - 1 {
            (values[idx] - values[idx - stride]) / spacing
        } else {
            (values[idx + stride] - values[idx - stride]) / (2.0 * spacing)
        };
    }
    out
}

/// Transpose of [`diff_axis`]: accumulates `Dᵀ g` into `acc`.
pub(crate) fn diff_axis_adjoint(
    g: &[f64],
    dims: [usize; 3],
    axis: usize,
    spacing: f64,
    acc: &mut [f64],
) {
    let n = dims[axis];
    let stride = axis_stride(dims, axis);
    for (idx, &gv) in g.iter().enumerate() {
        if gv == 0.0 {
            continue;
        }
        let pos = (idx / stride) % n;
        if pos == 0 {
            acc[idx + stride] += gv / spacing;
            acc[idx] -= gv / spacing;
        } else if pos == n - 1 {
            acc[idx] += gv / spacing;
            acc[idx - stride] -= gv / spacing;
        } else {
            acc[idx + stride] += gv / (2.0 * spacing);
            acc[idx - stride] -= gv / (2.0 * spacing);
        }
    }
}

#[inline]
fn axis_stride(dims: [usize; 3], axis: usize) -> usize {
    match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    }
}

/// `J[a][b] = ∂u_a/∂x_b` at every voxel.
pub fn spatial_jacobian(dvf: &DisplacementField) -> JacobianField {
    let grid = dvf.grid;
    let mut tensors = vec![[[0.0; 3]; 3]; grid.len()];
    for a in 0..3 {
        let comp = dvf.component(a);
        for b in 0..3 {
            let d = diff_axis(&comp, grid.dims, b, grid.spacing[b]);
            for (t, v) in tensors.iter_mut().zip(d) {
                t[a][b] = v;
            }
        }
    }
    JacobianField { grid, tensors }
}

/// Mean over voxels of the squared Frobenius norm of the spatial Jacobian.
pub fn smoothness_loss(dvf: &DisplacementField) -> f64 {
    smoothness_channels(&dvf.grid, &dvf.to_channels())
}

/// Smoothness of channel-major field data (3 × N values).
pub(crate) fn smoothness_channels(grid: &Grid, data: &[f64]) -> f64 {
    let n = grid.len();
    let mut total = 0.0;
    for a in 0..3 {
        let comp = &data[a * n..(a + 1) * n];
        for b in 0..3 {
            total += diff_axis(comp, grid.dims, b, grid.spacing[b])
                .iter()
                .map(|d| d * d)
                .sum::<f64>();
        }
    }
    total / n as f64
}

/// Gradient of [`smoothness_channels`] with respect to the channel data.
pub(crate) fn smoothness_channels_grad(grid: &Grid, data: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let mut grad = vec![0.0; 3 * n];
    let scale = 2.0 / n as f64;
    for a in 0..3 {
        let comp = &data[a * n..(a + 1) * n];
        let acc = &mut grad[a * n..(a + 1) * n];
        for b in 0..3 {
            let d: Vec<f64> = diff_axis(comp, grid.dims, b, grid.spacing[b])
                .into_iter()
                .map(|v| v * scale)
                .collect();
            diff_axis_adjoint(&d, grid.dims, b, grid.spacing[b], acc);
        }
    }
    grad
}

/// Gradient of [`smoothness_loss`] as a field of per-voxel partial derivatives.
pub fn smoothness_gradient(dvf: &DisplacementField) -> DisplacementField {
    let g = smoothness_channels_grad(&dvf.grid, &dvf.to_channels());
    DisplacementField::from_channels(dvf.grid, &g, dvf.from_frame, dvf.to_frame)
        .expect("gradient has field shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid, seed: u64) -> DisplacementField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..grid.len())
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        DisplacementField::new(grid, vectors, 0, 1).unwrap()
    }

    #[test]
    fn zero_and_constant_fields_have_zero_jacobian() {
        let g = Grid::new([4, 5, 6], [1.0, 0.5, 2.0]).unwrap();
        let z = spatial_jacobian(&DisplacementField::zeros(g, 0, 1));
        assert!(z
            .tensors
            .iter()
            .all(|t| t.iter().flatten().all(|v| *v == 0.0)));
        let c = DisplacementField::from_fn(g, 0, 1, |_| [1.5, -2.0, 0.25]);
        assert!(spatial_jacobian(&c)
            .tensors
            .iter()
            .all(|t| t.iter().flatten().all(|v| *v == 0.0)));
        assert_eq!(smoothness_loss(&c), 0.0);
    }

    #[test]
    fn affine_field_jacobian_is_exact() {
        let a = 0.3;
        let g = Grid::new([5, 4, 4], [1.5, 1.0, 1.0]).unwrap();
        let f = DisplacementField::from_fn(g, 0, 1, |p| [a * p[0], 0.0, 0.0]);
        for t in spatial_jacobian(&f).tensors {
            for r in 0..3 {
                for c in 0..3 {
                    let expect = if (r, c) == (0, 0) { a } else { 0.0 };
                    assert!((t[r][c] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn affine_smoothness_closed_form() {
        let a = 0.7;
        let g = Grid::cube(6, 1.0).unwrap();
        let f = DisplacementField::from_fn(g, 0, 1, |p| [a * p[0], 0.0, 0.0]);
        assert!((smoothness_loss(&f) - a * a).abs() < 1e-12);
    }

    #[test]
    fn smoothness_positive_for_non_constant() {
        let g = Grid::cube(5, 1.0).unwrap();
        for seed in 0..5 {
            assert!(smoothness_loss(&random_field(g, seed)) > 0.0);
        }
    }

    #[test]
    fn adjoint_matches_dot_product_identity() {
        let g = Grid::new([4, 3, 5], [1.0, 2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        for axis in 0..3 {
            let dx = diff_axis(&x, g.dims, axis, g.spacing[axis]);
            let mut dty = vec![0.0; g.len()];
            diff_axis_adjoint(&y, g.dims, axis, g.spacing[axis], &mut dty);
            let lhs: f64 = dx.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&dty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothness_gradient_matches_finite_differences() {
        let g = Grid::new([6, 6, 6], [1.0, 1.2, 0.8]).unwrap();
        let f = random_field(g, 11);
        let data = f.to_channels();
        let analytic = smoothness_channels_grad(&g, &data);
        let h = 1e-5;
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in (0..data.len()).step_by(7) {
            let mut p = data.clone();
            p[i] += h;
            let fp = smoothness_channels(&g, &p);
            p[i] -= 2.0 * h;
            let fm = smoothness_channels(&g, &p);
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max((numeric - analytic[i]).abs() / scale);
        }
        assert!(worst < 1e-5, "relative error {worst}");
    }
}
