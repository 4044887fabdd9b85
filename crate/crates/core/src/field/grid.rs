use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Axis-aligned voxel lattice with physical spacing in millimetres.
///
/// Voxel `(i, j, k)` sits at `origin + (i·sx, j·sy, k·sz)`; values are stored
/// X-fastest, then Y, then Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: Vec3) -> Result<Self> {
        Self::with_origin(dims, spacing, [0.0; 3])
    }

    pub fn with_origin(dims: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGrid(format!(
                "all dims must be >= 2, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    pub fn cube(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous index coordinates of a world point.
    #[inline]
    pub fn to_index(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Physical extent `dims·spacing` along each axis.
    pub fn extent(&self) -> Vec3 {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Geometric centre of the voxel lattice in world coordinates.
    pub fn center(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        c
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        let same = self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]))
            && (0..3).all(|a| close(self.origin[a], other.origin[a]));
        if same {
            Ok(())
        } else {
            Err(Error::GridMismatch {
                left: self.describe(),
                right: other.describe(),
            })
        }
    }

    pub(crate) fn describe(&self) -> String {
        format!(
            "{}x{}x{} @ {:?} mm (origin {:?})",
            self.dims[0], self.dims[1], self.dims[2], self.spacing, self.origin
        )
    }
}

/// A scalar 3D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub frame: Option<usize>,
}

impl Volume {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "volume needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume value at index {i}")));
        }
        Ok(Self {
            grid,
            values,
            frame: None,
        })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
            frame: None,
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                f(grid.world(i, j, k))
            })
            .collect();
        Self {
            grid,
            values,
            frame: None,
        }
    }

    pub fn with_frame(mut self, frame: usize) -> Self {
        self.frame = Some(frame);
        self
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    /// Axial (constant-z) slice as a row-major `Y×X` array.
    pub fn axial_slice(&self, k: usize) -> Vec<f64> {
        let [nx, ny, _] = self.grid.dims;
        let start = k * nx * ny;
        self.values[start..start + nx * ny].to_vec()
    }
}

/// A binary label image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub grid: Grid,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "mask needs {} labels, got {}",
                grid.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask label {} at index {i} is not binary",
                labels[i]
            )));
        }
        Ok(Self { grid, labels })
    }

    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            labels: vec![0; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> bool) -> Self {
        let labels = (0..grid.len())
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                f(grid.world(i, j, k)) as u8
            })
            .collect();
        Self { grid, labels }
    }

    pub fn from_index_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let labels = (0..grid.len())
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                f(i, j, k) as u8
            })
            .collect();
        Self { grid, labels }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> bool {
        self.labels[self.grid.index(i, j, k)] != 0
    }

    pub fn count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.iter().all(|&l| l == 0)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid,
            values: self.labels.iter().map(|&l| l as f64).collect(),
            frame: None,
        }
    }

    /// Foreground voxels with at least one background 6-neighbour; voxels on
    /// the grid edge count as touching background.
    pub fn boundary_voxels(&self) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.grid.dims;
        let mut out = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if !self.at(i, j, k) {
                        continue;
                    }
                    let on_edge =
                        i == 0 || j == 0 || k == 0 || i + 1 == nx || j + 1 == ny || k + 1 == nz;
                    if on_edge
                        || !self.at(i - 1, j, k)
                        || !self.at(i + 1, j, k)
                        || !self.at(i, j - 1, k)
                        || !self.at(i, j + 1, k)
                        || !self.at(i, j, k - 1)
                        || !self.at(i, j, k + 1)
                    {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }

    /// Binary dilation with a `(2r+1)³` cube.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let [nx, ny, nz] = self.grid.dims;
        let mut labels = vec![0u8; self.labels.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if !self.at(i, j, k) {
                        continue;
                    }
                    for kk in k.saturating_sub(radius)..=(k + radius).min(nz - 1) {
                        for jj in j.saturating_sub(radius)..=(j + radius).min(ny - 1) {
                            for ii in i.saturating_sub(radius)..=(i + radius).min(nx - 1) {
                                labels[self.grid.index(ii, jj, kk)] = 1;
                            }
                        }
                    }
                }
            }
        }
        Mask {
            grid: self.grid,
            labels,
        }
    }

    /// Voxels within `radius` (Chebyshev, in voxels) of the mask surface.
    pub fn shell(&self, radius: usize) -> Mask {
        let mut surface = Mask::empty(self.grid);
        for [i, j, k] in self.boundary_voxels() {
            surface.labels[self.grid.index(i, j, k)] = 1;
        }
        surface.dilate(radius)
    }
}

/// Dense displacement field in millimetres, defined on the target grid.
///
/// `from_frame` is the frame the field points into (the reference), `to_frame`
/// the frame whose grid it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    pub vectors: Vec<Vec3>,
    pub from_frame: usize,
    pub to_frame: usize,
}

impl DisplacementField {
    pub fn new(grid: Grid, vectors: Vec<Vec3>, from_frame: usize, to_frame: usize) -> Result<Self> {
        if vectors.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "displacement field needs {} vectors, got {}",
                grid.len(),
                vectors.len()
            )));
        }
        if let Some(i) = vectors
            .iter()
            .position(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::NonFinite(format!("displacement at index {i}")));
        }
        if from_frame == to_frame && vectors.iter().any(|v| *v != [0.0; 3]) {
            return Err(Error::InvalidArgument(format!(
                "field from frame {from_frame} to itself must be the identity"
            )));
        }
        Ok(Self {
            grid,
            vectors,
            from_frame,
            to_frame,
        })
    }

    /// Field without the frame-identity check; used for composed residuals.
    pub(crate) fn from_parts(
        grid: Grid,
        vectors: Vec<Vec3>,
        from_frame: usize,
        to_frame: usize,
    ) -> Self {
        Self {
            grid,
            vectors,
            from_frame,
            to_frame,
        }
    }

    pub fn zeros(grid: Grid, from_frame: usize, to_frame: usize) -> Self {
        Self::from_parts(grid, vec![[0.0; 3]; grid.len()], from_frame, to_frame)
    }

    pub fn from_fn(
        grid: Grid,
        from_frame: usize,
        to_frame: usize,
        f: impl Fn(Vec3) -> Vec3,
    ) -> Self {
        let vectors = (0..grid.len())
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                f(grid.world(i, j, k))
            })
            .collect();
        Self::from_parts(grid, vectors, from_frame, to_frame)
    }

    /// Channel-major copy: all x components, then y, then z.
    pub fn to_channels(&self) -> Vec<f64> {
        let n = self.vectors.len();
        let mut out = vec![0.0; 3 * n];
        for (idx, v) in self.vectors.iter().enumerate() {
            out[idx] = v[0];
            out[n + idx] = v[1];
            out[2 * n + idx] = v[2];
        }
        out
    }

    pub fn from_channels(
        grid: Grid,
        data: &[f64],
        from_frame: usize,
        to_frame: usize,
    ) -> Result<Self> {
        let n = grid.len();
        if data.len() != 3 * n {
            return Err(Error::InvalidArgument(format!(
                "channel data needs {} values, got {}",
                3 * n,
                data.len()
            )));
        }
        let vectors = (0..n)
            .map(|i| [data[i], data[n + i], data[2 * n + i]])
            .collect();
        Ok(Self::from_parts(grid, vectors, from_frame, to_frame))
    }

    pub fn component(&self, axis: usize) -> Vec<f64> {
        self.vectors.iter().map(|v| v[axis]).collect()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors.iter().map(|v| norm3(*v)).collect()
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.magnitudes().iter().sum::<f64>() / self.vectors.len() as f64
    }

    pub fn mean_vector(&self) -> Vec3 {
        let n = self.vectors.len() as f64;
        let mut m = [0.0; 3];
        for v in &self.vectors {
            for a in 0..3 {
                m[a] += v[a];
            }
        }
        m.map(|c| c / n)
    }
}

/// Per-voxel 3×3 derivative tensors `J[a][b] = ∂u_a/∂x_b` (dimensionless).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub grid: Grid,
    pub tensors: Vec<Mat3>,
}

#[inline]
pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
