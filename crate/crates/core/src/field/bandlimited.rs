//! Fourier band-limited displacement fields.
//!
//! Each channel is a real trigonometric polynomial
//! `c(x) = Σ_k A_k cos(2π k·x̂) + B_k sin(2π k·x̂)` over integer modes
//! `k ∈ [-Kx,Kx]×[-Ky,Ky]×[-Kz,Kz]`, with `x̂` the position normalised by the
//! grid extent. Synthesis and its adjoint are evaluated separably through
//! complex exponentials, one axis at a time.

use num_complex::Complex64;

use super::grid::{DisplacementField, Grid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BandlimitedDVF {
    pub grid: Grid,
    pub cutoff: [usize; 3],
    /// Channel-major; within a channel modes run kx fastest, then ky, kz; each
    /// mode stores `(cos, sin)` amplitudes.
    pub coeffs: Vec<f64>,
    pub from_frame: usize,
    pub to_frame: usize,
}

impl BandlimitedDVF {
    pub fn zeros(grid: Grid, cutoff: [usize; 3]) -> Result<Self> {
        check_cutoff(&grid, cutoff)?;
        Ok(Self {
            grid,
            cutoff,
            coeffs: vec![0.0; coeff_len(cutoff)],
            from_frame: 0,
            to_frame: 1,
        })
    }

    pub fn from_coeffs(grid: Grid, cutoff: [usize; 3], coeffs: Vec<f64>) -> Result<Self> {
        check_cutoff(&grid, cutoff)?;
        if coeffs.len() != coeff_len(cutoff) {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff:?} needs {} coefficients, got {}",
                coeff_len(cutoff),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("band-limited coefficient".into()));
        }
        Ok(Self {
            grid,
            cutoff,
            coeffs,
            from_frame: 0,
            to_frame: 1,
        })
    }

    pub fn with_frames(mut self, from_frame: usize, to_frame: usize) -> Self {
        self.from_frame = from_frame;
        self.to_frame = to_frame;
        self
    }

    /// Flat position of the `(cos, sin)` pair for `channel` and mode `k`.
    pub fn mode_index(&self, channel: usize, k: [i64; 3]) -> usize {
        mode_offset(self.cutoff, channel, k)
    }

    pub fn set_mode(&mut self, channel: usize, k: [i64; 3], cos_amp: f64, sin_amp: f64) {
        let i = self.mode_index(channel, k);
        self.coeffs[i] = cos_amp;
        self.coeffs[i + 1] = sin_amp;
    }

    /// Copies the coefficients into a differently sized band; modes outside
    /// the new band are dropped, new modes start at zero.
    pub fn resized(&self, cutoff: [usize; 3]) -> Result<Self> {
        let mut out = Self::zeros(self.grid, cutoff)?.with_frames(self.from_frame, self.to_frame);
        let k_common = [
            self.cutoff[0].min(cutoff[0]) as i64,
            self.cutoff[1].min(cutoff[1]) as i64,
            self.cutoff[2].min(cutoff[2]) as i64,
        ];
        for c in 0..3 {
            for kz in -k_common[2]..=k_common[2] {
                for ky in -k_common[1]..=k_common[1] {
                    for kx in -k_common[0]..=k_common[0] {
                        let src = self.mode_index(c, [kx, ky, kz]);
                        let dst = out.mode_index(c, [kx, ky, kz]);
                        out.coeffs[dst] = self.coeffs[src];
                        out.coeffs[dst + 1] = self.coeffs[src + 1];
                    }
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn coeff_len(cutoff: [usize; 3]) -> usize {
    3 * 2 * (2 * cutoff[0] + 1) * (2 * cutoff[1] + 1) * (2 * cutoff[2] + 1)
}

fn mode_offset(cutoff: [usize; 3], channel: usize, k: [i64; 3]) -> usize {
    let n = cutoff.map(|c| 2 * c + 1);
    let kx = (k[0] + cutoff[0] as i64) as usize;
    let ky = (k[1] + cutoff[1] as i64) as usize;
    let kz = (k[2] + cutoff[2] as i64) as usize;
    2 * (((channel * n[2] + kz) * n[1] + ky) * n[0] + kx)
}

pub(crate) fn check_cutoff(grid: &Grid, cutoff: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if 2 * cutoff[a] >= grid.dims[a] {
            return Err(Error::InvalidArgument(format!(
                "cutoff {} on axis {a} must be below half the grid size {}",
                cutoff[a], grid.dims[a]
            )));
        }
    }
    Ok(())
}

/// Largest cutoff not exceeding `wanted` that the grid can represent.
pub(crate) fn fit_cutoff(grid: &Grid, wanted: [usize; 3]) -> [usize; 3] {
    let mut out = wanted;
    for a in 0..3 {
        out[a] = wanted[a].min((grid.dims[a] - 1) / 2);
    }
    out
}

/// Precomputed per-axis exponentials `exp(i 2π k x̂)` for one target lattice.
#[derive(Debug, Clone)]
pub struct SynthBasis {
    pub(crate) cutoff: [usize; 3],
    pub(crate) target: Grid,
    /// `axes[a][(k + K) * n_a + i]`
    axes: [Vec<Complex64>; 3],
}

impl SynthBasis {
    /// Basis evaluated on the field's own lattice, `x̂ = i / N` exactly.
    pub fn native(grid: &Grid, cutoff: [usize; 3]) -> Result<Self> {
        check_cutoff(grid, cutoff)?;
        let axes = [0, 1, 2].map(|a| {
            let n = grid.dims[a];
            axis_table(cutoff[a], (0..n).map(|i| i as f64 / n as f64))
        });
        Ok(Self {
            cutoff,
            target: *grid,
            axes,
        })
    }

    /// Basis normalised by a reference lattice (`x̂ = (x - origin_ref) / extent_ref`)
    /// but evaluated on the nodes of `target`, e.g. a coarser pyramid level.
    pub fn on_target(reference: &Grid, target: &Grid, cutoff: [usize; 3]) -> Result<Self> {
        check_cutoff(target, cutoff)?;
        Ok(Self::sampled(reference, target, cutoff))
    }

    /// Like [`SynthBasis::on_target`] without the Nyquist check on `target`:
    /// modes the target cannot represent are simply point-sampled.
    pub(crate) fn sampled(reference: &Grid, target: &Grid, cutoff: [usize; 3]) -> Self {
        let extent = reference.extent();
        let axes = [0, 1, 2].map(|a| {
            let n = target.dims[a];
            axis_table(
                cutoff[a],
                (0..n).map(|i| {
                    (target.origin[a] + i as f64 * target.spacing[a] - reference.origin[a])
                        / extent[a]
                }),
            )
        });
        Self {
            cutoff,
            target: *target,
            axes,
        }
    }

    pub fn coeff_len(&self) -> usize {
        coeff_len(self.cutoff)
    }

    #[inline]
    fn e(&self, axis: usize, k: usize, i: usize) -> Complex64 {
        self.axes[axis][k * self.target.dims[axis] + i]
    }

    /// Coefficients → channel-major field samples (3·N values).
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = self.target.dims;
        let [mx, my, mz] = self.cutoff.map(|c| 2 * c + 1);
        let n = nx * ny * nz;
        let per_channel = 2 * mx * my * mz;
        let mut out = vec![0.0; 3 * n];
        for c in 0..3 {
            let cc = &coeffs[c * per_channel..(c + 1) * per_channel];
            // contract kx
            let mut t1 = vec![Complex64::new(0.0, 0.0); mz * my * nx];
            for kz in 0..mz {
                for ky in 0..my {
                    let row = &mut t1[(kz * my + ky) * nx..(kz * my + ky + 1) * nx];
                    for kx in 0..mx {
                        let m = 2 * ((kz * my + ky) * mx + kx);
                        let coef = Complex64::new(cc[m], -cc[m + 1]);
                        if coef.re == 0.0 && coef.im == 0.0 {
                            continue;
                        }
                        for (i, r) in row.iter_mut().enumerate() {
                            *r += coef * self.e(0, kx, i);
                        }
                    }
                }
            }
            // contract ky
            let mut t2 = vec![Complex64::new(0.0, 0.0); mz * ny * nx];
            for kz in 0..mz {
                for ky in 0..my {
                    let src = &t1[(kz * my + ky) * nx..(kz * my + ky + 1) * nx];
                    for j in 0..ny {
                        let w = self.e(1, ky, j);
                        let dst = &mut t2[(kz * ny + j) * nx..(kz * ny + j + 1) * nx];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * w;
                        }
                    }
                }
            }
            // contract kz, keep the real part
            let dst = &mut out[c * n..(c + 1) * n];
            for kz in 0..mz {
                for l in 0..nz {
                    let w = self.e(2, kz, l);
                    let plane = &mut dst[l * nx * ny..(l + 1) * nx * ny];
                    let src = &t2[kz * ny * nx..(kz + 1) * ny * nx];
                    for (d, s) in plane.iter_mut().zip(src) {
                        *d += s.re * w.re - s.im * w.im;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`synthesize`](Self::synthesize): field-space gradient →
    /// coefficient-space gradient.
    pub fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let [nx, ny, nz] = self.target.dims;
        let [mx, my, mz] = self.cutoff.map(|c| 2 * c + 1);
        let n = nx * ny * nz;
        let per_channel = 2 * mx * my * mz;
        let mut out = vec![0.0; 3 * per_channel];
        for c in 0..3 {
            let g = &grad[c * n..(c + 1) * n];
            let mut s2 = vec![Complex64::new(0.0, 0.0); mz * ny * nx];
            for kz in 0..mz {
                let dst = &mut s2[kz * ny * nx..(kz + 1) * ny * nx];
                for l in 0..nz {
                    let w = self.e(2, kz, l);
                    let plane = &g[l * nx * ny..(l + 1) * nx * ny];
                    for (d, &s) in dst.iter_mut().zip(plane) {
                        *d += w * s;
                    }
                }
            }
            let mut s1 = vec![Complex64::new(0.0, 0.0); mz * my * nx];
            for kz in 0..mz {
                for ky in 0..my {
                    let dst = &mut s1[(kz * my + ky) * nx..(kz * my + ky + 1) * nx];
                    for j in 0..ny {
                        let w = self.e(1, ky, j);
                        let src = &s2[(kz * ny + j) * nx..(kz * ny + j + 1) * nx];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s * w;
                        }
                    }
                }
            }
            let oc = &mut out[c * per_channel..(c + 1) * per_channel];
            for kz in 0..mz {
                for ky in 0..my {
                    let src = &s1[(kz * my + ky) * nx..(kz * my + ky + 1) * nx];
                    for kx in 0..mx {
                        let mut h = Complex64::new(0.0, 0.0);
                        for (i, s) in src.iter().enumerate() {
                            h += s * self.e(0, kx, i);
                        }
                        let m = 2 * ((kz * my + ky) * mx + kx);
                        oc[m] = h.re;
                        oc[m + 1] = h.im;
                    }
                }
            }
        }
        out
    }
}

fn axis_table(cutoff: usize, positions: impl Iterator<Item = f64> + Clone) -> Vec<Complex64> {
    let k_max = cutoff as i64;
    let mut out = Vec::new();
    for k in -k_max..=k_max {
        for x in positions.clone() {
            let theta = 2.0 * std::f64::consts::PI * k as f64 * x;
            out.push(Complex64::new(theta.cos(), theta.sin()));
        }
    }
    out
}

/// Evaluates the band-limited field on its own grid.
pub fn synthesize_bandlimited(b: &BandlimitedDVF) -> Result<DisplacementField> {
    let basis = SynthBasis::native(&b.grid, b.cutoff)?;
    let data = basis.synthesize(&b.coeffs);
    DisplacementField::from_channels(b.grid, &data, b.from_frame, b.to_frame)
}

/// Orthogonal projection of a field onto the band `[-K, K]³` on its own grid.
/// For fields already inside the band this inverts [`synthesize_bandlimited`]
/// up to the redundancy between modes `k` and `-k`.
pub fn project_bandlimited(dvf: &DisplacementField, cutoff: [usize; 3]) -> Result<BandlimitedDVF> {
    let basis = SynthBasis::native(&dvf.grid, cutoff)?;
    let n = dvf.grid.len() as f64;
    let coeffs = basis
        .adjoint(&dvf.to_channels())
        .into_iter()
        .map(|v| v / n)
        .collect();
    Ok(BandlimitedDVF::from_coeffs(dvf.grid, cutoff, coeffs)?
        .with_frames(dvf.from_frame, dvf.to_frame))
}
