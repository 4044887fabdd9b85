//! Band-limited variational registration.
//!
//! A pair is aligned by minimizing `sim(warp(moving, u), fixed) + λ·smooth(u)`
//! over the Fourier coefficients of `u` with Adam, coarse to fine. Each
//! pyramid level optimizes only the modes its lattice can represent; higher
//! modes are carried as a fixed offset field. A step that raises the loss is
//! undone and the learning rate halved, so the recorded loss never increases
//! within a level.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{
    check_cutoff, compose, fit_cutoff, project_bandlimited, synthesize_bandlimited, BandlimitedDVF,
    DisplacementField, Grid, SynthBasis, Volume,
};

const LNCC_EPS: f64 = 1e-5;
const CONVERGENCE_WINDOW: usize = 10;
const CONVERGENCE_TOL: f64 = 1e-6;
/// Smallest pyramid lattice the optimizer accepts.
const MIN_LEVEL_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Similarity {
    Mse,
    /// Local normalized cross-correlation over a cubic window of `window`
    /// voxels per side (odd) at full resolution.
    Lncc {
        window: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegConfig {
    pub similarity: Similarity,
    pub lambda_smooth: f64,
    pub cutoff: [usize; 3],
    pub levels: usize,
    pub iters_per_level: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Mse,
            lambda_smooth: 0.01,
            cutoff: [6, 6, 6],
            levels: 3,
            iters_per_level: 150,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_smooth must be >= 0, got {}",
                self.lambda_smooth
            )));
        }
        if self.levels == 0 || self.iters_per_level == 0 {
            return Err(Error::InvalidArgument(
                "levels and iters_per_level must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        check_cutoff(grid, self.cutoff)?;
        let shrink = 1usize << (self.levels - 1);
        if grid.dims.iter().any(|d| d / shrink < MIN_LEVEL_DIM) {
            return Err(Error::InvalidArgument(format!(
                "{} pyramid levels leave a level below {MIN_LEVEL_DIM} voxels on {:?}",
                self.levels, grid.dims
            )));
        }
        if let Similarity::Lncc { window } = self.similarity {
            if window == 0 || window % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "LNCC window must be odd, got {window}"
                )));
            }
            if grid.dims.iter().any(|d| window > *d) {
                return Err(Error::InvalidArgument(format!(
                    "LNCC window {window} exceeds grid {:?}",
                    grid.dims
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub total: f64,
    pub similarity: f64,
    pub smoothness: f64,
}

#[derive(Debug, Clone)]
pub struct RegResult {
    pub dvf: DisplacementField,
    pub coeffs: BandlimitedDVF,
    pub loss_trace: Vec<LossEntry>,
    /// Index into `loss_trace` where each pyramid level begins, coarsest first.
    pub level_starts: Vec<usize>,
    pub converged: bool,
}

/// Similarity term on the tape. `radius` only matters for LNCC.
pub(crate) fn similarity_on_tape(
    t: &mut Tape,
    a: Var,
    b: Var,
    dims: [usize; 3],
    kind: Similarity,
    radius: usize,
) -> Result<Var> {
    match kind {
        Similarity::Mse => t.mse(a, b),
        Similarity::Lncc { .. } => {
            let ma = t.box_mean(a, dims, radius)?;
            let mb = t.box_mean(b, dims, radius)?;
            let ab = t.mul(a, b)?;
            let aa = t.mul(a, a)?;
            let bb = t.mul(b, b)?;
            let m_ab = t.box_mean(ab, dims, radius)?;
            let m_aa = t.box_mean(aa, dims, radius)?;
            let m_bb = t.box_mean(bb, dims, radius)?;
            let ma_mb = t.mul(ma, mb)?;
            let ma2 = t.mul(ma, ma)?;
            let mb2 = t.mul(mb, mb)?;
            let cov = t.sub(m_ab, ma_mb)?;
            let va = t.sub(m_aa, ma2)?;
            let vb = t.sub(m_bb, mb2)?;
            let cov = t.add_scalar(cov, LNCC_EPS);
            let va = t.add_scalar(va, LNCC_EPS);
            let vb = t.add_scalar(vb, LNCC_EPS);
            let denom = t.mul(va, vb)?;
            let denom = t.sqrt(denom)?;
            let ncc = t.div(cov, denom)?;
            let m = t.mean(ncc);
            let neg = t.scale(m, -1.0);
            Ok(t.add_scalar(neg, 1.0))
        }
    }
}

/// Window radius at a pyramid level; the physical window size is kept.
fn level_radius(kind: Similarity, level: usize) -> usize {
    match kind {
        Similarity::Mse => 0,
        Similarity::Lncc { window } => ((window / 2) >> level).max(1),
    }
}

/// MSE, or `1 − mean local NCC`.
pub fn similarity_loss(a: &Volume, b: &Volume, kind: Similarity) -> Result<f64> {
    a.grid.ensure_same(&b.grid)?;
    if let Similarity::Lncc { window } = kind {
        if window == 0 || window % 2 == 0 || a.grid.dims.iter().any(|d| window > *d) {
            return Err(Error::InvalidArgument(format!(
                "LNCC window {window} does not fit grid {:?}",
                a.grid.dims
            )));
        }
    }
    let [nx, ny, nz] = a.grid.dims;
    let mut t = Tape::new();
    let av = t.constant(Tensor::new(vec![nz, ny, nx], a.values.clone())?);
    let bv = t.constant(Tensor::new(vec![nz, ny, nx], b.values.clone())?);
    let s = similarity_on_tape(&mut t, av, bv, a.grid.dims, kind, level_radius(kind, 0))?;
    Ok(t.scalar(s))
}

/// Level 0 is the input; each next level averages 2×2×2 blocks and doubles
/// the spacing. Odd trailing voxels are dropped.
pub fn build_pyramid(vol: &Volume, levels: usize) -> Result<Vec<Volume>> {
    if levels == 0 {
        return Err(Error::InvalidArgument(
            "pyramid needs at least one level".into(),
        ));
    }
    let mut out = vec![vol.clone()];
    for l in 1..levels {
        let prev = &out[l - 1];
        let g = prev.grid;
        let dims = g.dims.map(|d| d / 2);
        if dims.iter().any(|d| *d < 2) {
            return Err(Error::InvalidArgument(format!(
                "{levels} pyramid levels are too many for grid {:?}",
                vol.grid.dims
            )));
        }
        let spacing = [2.0 * g.spacing[0], 2.0 * g.spacing[1], 2.0 * g.spacing[2]];
        let origin = [0, 1, 2].map(|a| g.origin[a] + 0.5 * g.spacing[a]);
        let grid = Grid::with_origin(dims, spacing, origin)?;
        let mut values = vec![0.0; grid.len()];
        for (idx, v) in values.iter_mut().enumerate() {
            let [i, j, k] = grid.coords(idx);
            let mut s = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += prev.at(2 * i + dx, 2 * j + dy, 2 * k + dz);
                    }
                }
            }
            *v = s / 8.0;
        }
        let mut v = Volume::new(grid, values)?;
        v.frame = vol.frame;
        out.push(v);
    }
    Ok(out)
}

/// Per-coefficient scale `1 / (1 + |k|²)` applied to the optimizer's
/// variables, so a unit Adam step moves high-frequency modes less.
fn mode_weights(cutoff: [usize; 3]) -> Vec<f64> {
    let k = cutoff.map(|c| c as i64);
    let mut w = Vec::new();
    for _channel in 0..3 {
        for kz in -k[2]..=k[2] {
            for ky in -k[1]..=k[1] {
                for kx in -k[0]..=k[0] {
                    let v = 1.0 / (1.0 + (kx * kx + ky * ky + kz * kz) as f64);
                    w.push(v);
                    w.push(v);
                }
            }
        }
    }
    w
}

struct LevelProblem {
    grid: Grid,
    weights: Vec<f64>,
    basis: Arc<SynthBasis>,
    fixed: Tensor,
    moving: Tensor,
    /// Contribution of modes above this level's band, evaluated on its lattice.
    offset: Tensor,
    kind: Similarity,
    radius: usize,
    lambda: f64,
}

impl LevelProblem {
    fn evaluate(&self, coeffs: &[f64]) -> Result<(LossEntry, Vec<f64>)> {
        let mut t = Tape::new();
        let c = t.input(Tensor::vector(coeffs.to_vec()).with_grad());
        let u = t.synth(c, self.basis.clone())?;
        let off = t.constant(self.offset.clone());
        let u = t.add(u, off)?;
        let mv = t.constant(self.moving.clone());
        let fv = t.constant(self.fixed.clone());
        let w = t.warp(mv, u, &self.grid)?;
        let sim = similarity_on_tape(&mut t, w, fv, self.grid.dims, self.kind, self.radius)?;
        let sm = t.smoothness(u, &self.grid)?;
        let reg = t.scale(sm, self.lambda);
        let total = t.add(sim, reg)?;
        let entry = LossEntry {
            total: t.scalar(total),
            similarity: t.scalar(sim),
            smoothness: t.scalar(sm),
        };
        let g = t.backward(total, None)?;
        let grad = g
            .get(c)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; coeffs.len()]);
        Ok((entry, grad))
    }
}

fn volume_tensor(v: &Volume) -> Result<Tensor> {
    let [nx, ny, nz] = v.grid.dims;
    Tensor::new(vec![nz, ny, nx], v.values.clone())
}

/// Registers `moving` onto `fixed` from zero initial coefficients.
pub fn register_pair(fixed: &Volume, moving: &Volume, cfg: &RegConfig) -> Result<RegResult> {
    register_pair_from(fixed, moving, cfg, None)
}

/// Registers `moving` onto `fixed`, starting from `init` when given.
pub fn register_pair_from(
    fixed: &Volume,
    moving: &Volume,
    cfg: &RegConfig,
    init: Option<&BandlimitedDVF>,
) -> Result<RegResult> {
    fixed.grid.ensure_same(&moving.grid)?;
    let grid = fixed.grid;
    cfg.validate(&grid)?;
    let mut full = match init {
        Some(b) => {
            grid.ensure_same(&b.grid)?;
            b.resized(cfg.cutoff)?
        }
        None => BandlimitedDVF::zeros(grid, cfg.cutoff)?,
    };
    let fixed_pyr = build_pyramid(fixed, cfg.levels)?;
    let moving_pyr = build_pyramid(moving, cfg.levels)?;

    let mut trace = Vec::new();
    let mut level_starts = Vec::new();
    let mut converged = false;
    for level in (0..cfg.levels).rev() {
        level_starts.push(trace.len());
        let lgrid = fixed_pyr[level].grid;
        let band = fit_cutoff(&lgrid, cfg.cutoff);
        let low = full.resized(band)?;
        let basis = Arc::new(SynthBasis::on_target(&grid, &lgrid, band)?);
        let [nx, ny, nz] = lgrid.dims;
        let offset = if band == cfg.cutoff {
            vec![0.0; 3 * lgrid.len()]
        } else {
            // modes above this lattice's band stay fixed at their current values
            let high: Vec<f64> = full
                .coeffs
                .iter()
                .zip(&low.resized(cfg.cutoff)?.coeffs)
                .map(|(a, b)| a - b)
                .collect();
            SynthBasis::sampled(&grid, &lgrid, cfg.cutoff).synthesize(&high)
        };
        let problem = LevelProblem {
            grid: lgrid,
            basis,
            fixed: volume_tensor(&fixed_pyr[level])?,
            moving: volume_tensor(&moving_pyr[level])?,
            offset: Tensor::new(vec![3, nz, ny, nx], offset)?,
            kind: cfg.similarity,
            radius: level_radius(cfg.similarity, level),
            lambda: cfg.lambda_smooth,
            weights: mode_weights(band),
        };
        let (coeffs, level_converged) =
            optimize_level(&problem, low.coeffs.clone(), cfg, &mut trace)?;
        converged = level_converged;
        let tuned = BandlimitedDVF::from_coeffs(grid, band, coeffs)?.resized(cfg.cutoff)?;
        let dropped = low.resized(cfg.cutoff)?;
        for ((f, n), o) in full
            .coeffs
            .iter_mut()
            .zip(&tuned.coeffs)
            .zip(&dropped.coeffs)
        {
            *f += n - o;
        }
    }

    let full = full.with_frames(moving.frame.unwrap_or(0), fixed.frame.unwrap_or(0));
    let mut dvf = synthesize_bandlimited(&full)?;
    dvf.from_frame = full.from_frame;
    dvf.to_frame = full.to_frame;
    Ok(RegResult {
        dvf,
        coeffs: full,
        loss_trace: trace,
        level_starts,
        converged,
    })
}

fn optimize_level(
    problem: &LevelProblem,
    coeffs: Vec<f64>,
    cfg: &RegConfig,
    trace: &mut Vec<LossEntry>,
) -> Result<(Vec<f64>, bool)> {
    let start = trace.len();
    let w = &problem.weights;
    // optimizer variables θ with coeffs = w ⊙ θ
    let to_coeffs = |theta: &[f64]| theta.iter().zip(w).map(|(t, w)| t * w).collect::<Vec<_>>();
    let to_theta_grad = |g: Vec<f64>| g.iter().zip(w).map(|(g, w)| g * w).collect::<Vec<_>>();
    let diverged = |trace: &Vec<LossEntry>, reason: String| Error::Diverged {
        iteration: trace.len(),
        reason,
    };

    let mut theta: Vec<f64> = coeffs.iter().zip(w).map(|(c, w)| c / w).collect();
    let (mut entry, grad) = problem.evaluate(&coeffs)?;
    if !entry.total.is_finite() {
        return Err(diverged(trace, "non-finite initial loss".into()));
    }
    let mut grad = to_theta_grad(grad);
    trace.push(entry);
    let mut adam = Adam::new(cfg.lr);
    let name = "theta".to_string();
    let mut converged = false;
    for _ in 1..cfg.iters_per_level {
        let mut params = BTreeMap::from([(name.clone(), Tensor::vector(theta.clone()))]);
        let grads = BTreeMap::from([(name.clone(), Tensor::vector(grad.clone()))]);
        adam.step(&mut params, &grads)
            .map_err(|e| diverged(trace, e.to_string()))?;
        let candidate = params.remove(&name).expect("present").into_data();
        let (cand_entry, cand_grad) = problem.evaluate(&to_coeffs(&candidate))?;
        if !cand_entry.total.is_finite() {
            return Err(diverged(trace, "non-finite loss".into()));
        }
        if cand_entry.total <= entry.total {
            theta = candidate;
            entry = cand_entry;
            grad = to_theta_grad(cand_grad);
        } else {
            adam.lr *= 0.5;
        }
        trace.push(entry);
        if trace.len() - start > CONVERGENCE_WINDOW {
            let old = trace[trace.len() - 1 - CONVERGENCE_WINDOW].total;
            if (old - entry.total).abs() <= CONVERGENCE_TOL * old.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        }
    }
    Ok((to_coeffs(&theta), converged))
}

/// Registers every frame to the reference `m`. Returns `T − 1` fields in
/// ascending frame order (skipping `m`); field `t` maps reference coordinates
/// into frame `t`'s lattice in pull convention.
///
/// Frames are visited outward from the reference (`m+1, m+2, …` then
/// `m−1, m−2, …`). Each non-adjacent frame starts from the previous solution
/// composed with a short registration between the two neighbouring frames.
pub fn track_cycle(frames: &[Volume], m: usize, cfg: &RegConfig) -> Result<Vec<DisplacementField>> {
    let t_len = frames.len();
    if t_len < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames, got {t_len}"
        )));
    }
    if m >= t_len {
        return Err(Error::InvalidArgument(format!(
            "reference {m} outside 0..{t_len}"
        )));
    }
    let grid = frames[m].grid;
    for f in frames {
        grid.ensure_same(&f.grid)?;
    }
    cfg.validate(&grid)?;
    let tagged = |t: usize| {
        let mut v = frames[t].clone();
        v.frame = Some(t);
        v
    };
    let reference = tagged(m);
    let mut out: Vec<Option<DisplacementField>> = vec![None; t_len];

    let chains: [Vec<usize>; 2] = [(m + 1..t_len).collect(), (0..m).rev().collect()];
    for chain in chains {
        let mut prev: Option<(usize, DisplacementField)> = None;
        for t in chain {
            let target = tagged(t);
            let init = match &prev {
                None => None,
                Some((p, prev_dvf)) => {
                    let step =
                        register_pair(&target, &tagged(*p), cfg).map_err(|e| e.in_frame(t))?;
                    let guess = compose(prev_dvf, &step.dvf).map_err(|e| e.in_frame(t))?;
                    Some(project_bandlimited(&guess, cfg.cutoff).map_err(|e| e.in_frame(t))?)
                }
            };
            let res = register_pair_from(&target, &reference, cfg, init.as_ref())
                .map_err(|e| e.in_frame(t))?;
            let mut dvf = res.dvf;
            dvf.from_frame = m;
            dvf.to_frame = t;
            prev = Some((t, dvf.clone()));
            out[t] = Some(dvf);
        }
    }
    Ok(out.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_of_4_cube_gives_octant_means() {
        let grid = Grid::cube(4, 1.0).unwrap();
        let vol = Volume::new(grid, (0..64).map(|v| v as f64).collect()).unwrap();
        let pyr = build_pyramid(&vol, 2).unwrap();
        assert_eq!(pyr.len(), 2);
        assert_eq!(pyr[1].grid.dims, [2, 2, 2]);
        assert_eq!(pyr[1].grid.spacing, [2.0; 3]);
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let mut s = 0.0;
                    for z in 2 * k..2 * k + 2 {
                        for y in 2 * j..2 * j + 2 {
                            for x in 2 * i..2 * i + 2 {
                                s += (x + 4 * y + 16 * z) as f64;
                            }
                        }
                    }
                    assert_eq!(pyr[1].at(i, j, k), s / 8.0);
                }
            }
        }
    }

    #[test]
    fn pyramid_limits() {
        let grid = Grid::cube(8, 1.0).unwrap();
        let vol = Volume::constant(grid, 3.25);
        assert_eq!(build_pyramid(&vol, 1).unwrap(), vec![vol.clone()]);
        for l in build_pyramid(&vol, 3).unwrap() {
            assert!(l.values.iter().all(|v| *v == 3.25));
        }
        assert!(build_pyramid(&vol, 4).is_err());
        assert!(build_pyramid(&vol, 0).is_err());
    }
}
