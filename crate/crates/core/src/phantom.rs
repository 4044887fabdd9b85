//! Synthetic beating-ellipsoid cases with closed-form ground truth.
//!
//! Frame `t` is the reference intensity pulled through the analytic field:
//! `I_t(x) = I_0(x + u(x, t))`, so `u(·, t)` is exactly the displacement that
//! [`crate::field::warp_volume`] needs to map frame 0 onto frame `t`. The
//! material contracts toward the centre, which in this pull convention means
//! the field points outward.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm3, spatial_jacobian, DisplacementField, Grid, Mask, Vec3, Volume};
use crate::par;

/// Semi-axes of the outer ellipsoid as fractions of the grid extent.
const SEMI_AXES: Vec3 = [0.30, 0.27, 0.24];
const WALL_INTENSITY: f64 = 0.7;
const POOL_INTENSITY: f64 = 0.3;
const BACKGROUND_INTENSITY: f64 = 0.1;
const TEXTURE_WAVES: usize = 24;
/// Envelope radius (fraction of the half-extent) beyond which motion fades.
const ENVELOPE_RADIUS: f64 = 0.8;
const MIN_JACOBIAN_DET: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub frames: usize,
    pub wall_voxels: f64,
    /// Peak radial displacement as a fraction of the distance to the centre.
    pub amplitude: f64,
    /// Peak twist about the z axis in radians at the top and bottom faces.
    pub twist: f64,
    /// Noise standard deviation as a fraction of the noise-free intensity range.
    pub noise: f64,
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing_mm: 1.8,
            frames: 24,
            wall_voxels: 2.0,
            amplitude: 0.12,
            twist: 0.05,
            noise: 0.02,
            texture_scale: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, [self.spacing_mm; 3])
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "phantom needs at least 2 frames, got {}",
                self.frames
            )));
        }
        let finite = [
            self.wall_voxels,
            self.amplitude,
            self.twist,
            self.noise,
            self.texture_scale,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "phantom parameters must be finite and nonnegative".into(),
            ));
        }
        if self.wall_voxels <= 0.0 {
            return Err(Error::InvalidArgument(
                "wall thickness must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Motion scale `s(t) = amplitude·½(1 − cos 2πt/T)`; periodic in `t` with period `T`.
    pub fn motion_scale(&self, t: f64) -> f64 {
        self.amplitude * 0.5 * (1.0 - (2.0 * PI * t / self.frames as f64).cos())
    }

    /// Frame with the largest contraction.
    pub fn peak_frame(&self) -> usize {
        self.frames / 2
    }
}

/// Closed-form reference geometry and texture of one configuration.
#[derive(Debug, Clone)]
pub struct PhantomModel {
    pub cfg: PhantomConfig,
    pub grid: Grid,
    center: Vec3,
    half_extent: f64,
    semi: Vec3,
    waves: Vec<(Vec3, f64)>,
}

impl PhantomModel {
    pub fn new(cfg: &PhantomConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let ext = grid.extent();
        let semi = [
            SEMI_AXES[0] * ext[0],
            SEMI_AXES[1] * ext[1],
            SEMI_AXES[2] * ext[2],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.spacing_mm;
        let waves = (0..TEXTURE_WAVES)
            .map(|_| {
                // wavelengths of 3 to 7 voxels
                let lambda = rng.random_range(3.0..7.0) * h;
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                let k = 2.0 * PI / lambda;
                (
                    [k * r * phi.cos(), k * r * phi.sin(), k * z],
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        Ok(Self {
            cfg: *cfg,
            grid,
            center: grid.center(),
            half_extent: 0.5 * ext[0].min(ext[1]).min(ext[2]),
            semi,
            waves,
        })
    }

    /// Normalized ellipsoidal radius; 1 on the outer surface.
    pub fn rho(&self, p: Vec3) -> f64 {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.semi[a];
            s += d * d;
        }
        s.sqrt()
    }

    fn mean_semi(&self) -> f64 {
        (self.semi[0] + self.semi[1] + self.semi[2]) / 3.0
    }

    /// Noise-free reference intensity at a world point.
    pub fn intensity(&self, p: Vec3) -> f64 {
        let rho = self.rho(p);
        let a = self.mean_semi();
        let h = self.cfg.spacing_mm;
        let inner = 1.0 - self.cfg.wall_voxels * h / a;
        // edges smoothed over about half a voxel
        let edge = |r: f64| 0.5 * (1.0 - ((rho - r) * a / (0.5 * h)).tanh());
        let outer = edge(1.0);
        let pool = edge(inner);
        let base = BACKGROUND_INTENSITY
            + (WALL_INTENSITY - BACKGROUND_INTENSITY) * outer
            + (POOL_INTENSITY - WALL_INTENSITY) * pool;
        base + self.texture(p)
    }

    fn texture(&self, p: Vec3) -> f64 {
        if self.cfg.texture_scale == 0.0 {
            return 0.0;
        }
        let norm = (2.0 / TEXTURE_WAVES as f64).sqrt();
        let s: f64 = self
            .waves
            .iter()
            .map(|(k, ph)| (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + ph).cos())
            .sum();
        self.cfg.texture_scale * norm * s
    }

    /// Reference mask: the filled outer ellipsoid (wall and blood pool).
    pub fn inside(&self, p: Vec3) -> bool {
        self.rho(p) <= 1.0
    }

    /// Displacement `u(x, t)` in millimetres.
    pub fn displacement(&self, p: Vec3, t: f64) -> Vec3 {
        displacement_closed_form(&self.cfg, self.center, self.half_extent, p, t)
    }
}

fn displacement_closed_form(cfg: &PhantomConfig, c: Vec3, half: f64, p: Vec3, t: f64) -> Vec3 {
    let s = cfg.motion_scale(t);
    if s == 0.0 {
        return [0.0; 3];
    }
    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
    let rn = norm3(d) / half;
    let w = (-(rn / ENVELOPE_RADIUS).powi(4)).exp();
    let zn = d[2] / half;
    let twist = if cfg.amplitude > 0.0 {
        cfg.twist / cfg.amplitude
    } else {
        0.0
    };
    // radial part pulls from further out; twist rotates about z
    let k = s * w;
    [
        k * (d[0] - twist * zn * d[1]),
        k * (d[1] + twist * zn * d[0]),
        k * d[2],
    ]
}

/// Ground-truth field from frame 0 to frame `t`, sampled on the case grid.
pub fn analytic_dvf(cfg: &PhantomConfig, t: usize) -> Result<DisplacementField> {
    if t >= cfg.frames {
        return Err(Error::InvalidArgument(format!(
            "frame {t} outside 0..{}",
            cfg.frames
        )));
    }
    let model = PhantomModel::new(cfg)?;
    Ok(model_dvf(&model, t))
}

fn model_dvf(model: &PhantomModel, t: usize) -> DisplacementField {
    DisplacementField::from_fn(model.grid, 0, t, |p| model.displacement(p, t as f64))
}

/// A generated case. Frame 0 is the reference.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub config: PhantomConfig,
    pub grid: Grid,
    pub frames: Vec<Volume>,
    pub masks: Vec<Mask>,
    /// `gt_dvfs[t - 1]` maps frame 0 onto frame `t`.
    pub gt_dvfs: Vec<DisplacementField>,
    /// Axial slice index used for the 2D+t sequences.
    pub slice_index: usize,
}

impl PhantomCase {
    pub fn reference(&self) -> usize {
        0
    }

    pub fn gt_dvf(&self, t: usize) -> Option<&DisplacementField> {
        if t == 0 {
            None
        } else {
            self.gt_dvfs.get(t - 1)
        }
    }

    /// Axial slice of every frame at `slice_index`.
    pub fn slices(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.axial_slice(self.slice_index))
            .collect()
    }
}

/// Deterministic per-frame noise stream.
fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

pub fn generate_case(cfg: &PhantomConfig) -> Result<PhantomCase> {
    let model = PhantomModel::new(cfg)?;
    let grid = model.grid;

    let mut gt_dvfs = Vec::with_capacity(cfg.frames - 1);
    for t in 1..cfg.frames {
        let dvf = model_dvf(&model, t);
        let det = min_jacobian_det(&dvf);
        if det <= MIN_JACOBIAN_DET {
            return Err(Error::InvalidArgument(format!(
                "phantom motion folds at frame {t} (min det(I+∇u) = {det:.3}); reduce the amplitude or twist"
            )));
        }
        gt_dvfs.push(dvf);
    }

    let clean: Vec<Vec<f64>> = (0..cfg.frames)
        .map(|t| {
            par::map_indices(grid.len(), |idx| {
                let [i, j, k] = grid.coords(idx);
                let p = grid.world(i, j, k);
                let u = model.displacement(p, t as f64);
                model.intensity([p[0] + u[0], p[1] + u[1], p[2] + u[2]])
            })
        })
        .collect();
    let (lo, hi) = clean[0]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let sigma = cfg.noise * (hi - lo);

    let mut frames = Vec::with_capacity(cfg.frames);
    for (t, mut values) in clean.into_iter().enumerate() {
        if sigma > 0.0 {
            let normal =
                Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut rng = frame_rng(cfg.seed, t);
            for v in values.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        frames.push(Volume::new(grid, values)?.with_frame(t));
    }

    let masks = (0..cfg.frames)
        .map(|t| {
            Mask::from_fn(grid, |p| {
                let u = model.displacement(p, t as f64);
                model.inside([p[0] + u[0], p[1] + u[1], p[2] + u[2]])
            })
        })
        .collect();

    Ok(PhantomCase {
        config: *cfg,
        grid,
        frames,
        masks,
        gt_dvfs,
        slice_index: cfg.dims[2] / 2,
    })
}

/// Smallest `det(I + ∇u)` over the grid.
pub fn min_jacobian_det(dvf: &DisplacementField) -> f64 {
    spatial_jacobian(dvf)
        .tensors
        .iter()
        .map(|j| {
            let f = |a: usize, b: usize| j[a][b] + if a == b { 1.0 } else { 0.0 };
            f(0, 0) * (f(1, 1) * f(2, 2) - f(1, 2) * f(2, 1))
                - f(0, 1) * (f(1, 0) * f(2, 2) - f(1, 2) * f(2, 0))
                + f(0, 2) * (f(1, 0) * f(2, 1) - f(1, 1) * f(2, 0))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Mean and maximum Euclidean distance between two fields, in millimetres,
/// optionally restricted to the voxels set in `region`.
pub fn endpoint_error(
    est: &DisplacementField,
    gt: &DisplacementField,
    region: Option<&Mask>,
) -> Result<(f64, f64)> {
    est.grid.ensure_same(&gt.grid)?;
    if let Some(m) = region {
        est.grid.ensure_same(&m.grid)?;
        if m.is_empty() {
            return Err(Error::EmptyMask("endpoint-error region".into()));
        }
    }
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for (idx, (a, b)) in est.vectors.iter().zip(&gt.vectors).enumerate() {
        if region.is_some_and(|m| m.labels[idx] == 0) {
            continue;
        }
        let e = norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]]);
        sum += e;
        max = max.max(e);
        n += 1;
    }
    Ok((sum / n as f64, max))
}
