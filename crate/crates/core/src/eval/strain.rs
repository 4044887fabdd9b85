use nalgebra::{Matrix3, SymmetricEigen};

use crate::field::{spatial_jacobian, DisplacementField, Grid, Mat3};

/// Per-voxel Green–Lagrange strain `E = ½(FᵀF − I)` with `F = I + ∇u`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainField {
    pub grid: Grid,
    pub tensors: Vec<Mat3>,
}

impl StrainField {
    /// First invariant `tr E` per voxel.
    pub fn trace(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .map(|e| e[0][0] + e[1][1] + e[2][2])
            .collect()
    }

    /// Largest eigenvalue of `E` per voxel.
    pub fn max_principal(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .map(|e| {
                let m = Matrix3::from_fn(|r, c| e[r][c]);
                SymmetricEigen::new(m).eigenvalues.max()
            })
            .collect()
    }

    /// Frobenius norm of `E` per voxel.
    pub fn frobenius(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .map(|e| e.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

pub fn green_lagrange(dvf: &DisplacementField) -> StrainField {
    let jac = spatial_jacobian(dvf);
    let tensors = jac
        .tensors
        .iter()
        .map(|j| {
            // E = ½(J + Jᵀ + JᵀJ), symmetric by construction
            let mut e = [[0.0; 3]; 3];
            for r in 0..3 {
                for c in r..3 {
                    let mut jtj = 0.0;
                    for k in 0..3 {
                        jtj += j[k][r] * j[k][c];
                    }
                    let v = 0.5 * (j[r][c] + j[c][r] + jtj);
                    e[r][c] = v;
                    e[c][r] = v;
                }
            }
            e
        })
        .collect();
    StrainField {
        grid: dvf.grid,
        tensors,
    }
}
