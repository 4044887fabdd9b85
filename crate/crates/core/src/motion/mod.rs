//! Conditional VAE motion model.
//!
//! A posterior encoder sees the target field, the reference volume and a
//! short history of axial slices and yields a diagonal Gaussian over a
//! latent code. The decoder maps the code plus conditioning features to a
//! dense field, which warps the reference onto the target frame. At inference
//! the field is unknown, so a predictive head regresses the posterior mean
//! from the conditioning features alone and decoding runs with `ε = 0`.
//!
//! Conditioning features come from a slice/volume convolutional branch
//! (Motion), a frozen 2D+t masked autoencoder (MAE), or both concatenated.

mod compare;
mod cvae;
mod mae;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::kl_value;
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Volume};

pub use compare::{compare_methods, CompareConfig, MethodRow, BASELINE_LABEL};
pub use cvae::{
    condition_features, cvae_gradient_check, cvae_loss, decode, encode, predict_ahead, train_cvae,
    CvaeArch, CvaeLoss, CvaeModel, EpochLoss, LossVars, TrainConfig,
};
pub use mae::{patchify, pretrain_mae, MaeConfig, MaeModel};

/// Lower bound added to every softplus standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Source of the conditioning features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EncoderMode {
    #[serde(rename = "motion")]
    Motion,
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "motion+mae")]
    MotionMae,
}

impl EncoderMode {
    pub const ALL: [EncoderMode; 3] = [
        EncoderMode::Motion,
        EncoderMode::Mae,
        EncoderMode::MotionMae,
    ];

    pub fn uses_motion(self) -> bool {
        matches!(self, EncoderMode::Motion | EncoderMode::MotionMae)
    }

    pub fn uses_mae(self) -> bool {
        matches!(self, EncoderMode::Mae | EncoderMode::MotionMae)
    }

    /// Row label in method tables.
    pub fn label(self) -> &'static str {
        match self {
            EncoderMode::Motion => "Motion encoder",
            EncoderMode::Mae => "MAE encoder",
            EncoderMode::MotionMae => "Motion+MAE encoder",
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::Motion => "motion",
            EncoderMode::Mae => "mae",
            EncoderMode::MotionMae => "motion+mae",
        })
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "motion" => Ok(EncoderMode::Motion),
            "mae" => Ok(EncoderMode::Mae),
            "motion+mae" | "motion-mae" => Ok(EncoderMode::MotionMae),
            other => Err(Error::InvalidArgument(format!(
                "unknown encoder mode `{other}` (motion, mae, motion+mae)"
            ))),
        }
    }
}

/// Axial slices of the most recent frames, newest first:
/// `slices[j]` is frame `last_frame − j` (cyclically).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence {
    pub slices: Vec<Vec<f64>>,
    /// `[X, Y]` of every slice.
    pub dims: [usize; 2],
    pub last_frame: usize,
}

impl SliceSequence {
    pub fn new(slices: Vec<Vec<f64>>, dims: [usize; 2], last_frame: usize) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::InvalidArgument(
                "slice sequence needs at least one step".into(),
            ));
        }
        let n = dims[0] * dims[1];
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "slice dims {dims:?} are empty"
            )));
        }
        if let Some((j, s)) = slices.iter().enumerate().find(|(_, s)| s.len() != n) {
            return Err(Error::InvalidArgument(format!(
                "slice {j} has {} values, expected {n}",
                s.len()
            )));
        }
        if slices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("slice sequence".into()));
        }
        Ok(Self {
            slices,
            dims,
            last_frame,
        })
    }

    /// History ending at `last_frame`, taken from a periodic cycle of frames.
    pub fn from_cycle(
        frames: &[Volume],
        slice_index: usize,
        last_frame: usize,
        n_steps: usize,
    ) -> Result<Self> {
        let t = frames.len();
        if t == 0 || n_steps == 0 {
            return Err(Error::InvalidArgument(
                "need frames and at least one step".into(),
            ));
        }
        if last_frame >= t {
            return Err(Error::InvalidArgument(format!(
                "last frame {last_frame} outside a cycle of {t}"
            )));
        }
        let [nx, ny, nz] = frames[0].grid.dims;
        if slice_index >= nz {
            return Err(Error::InvalidArgument(format!(
                "slice index {slice_index} outside {nz} slices"
            )));
        }
        let slices = (0..n_steps)
            .map(|j| frames[(last_frame + t * n_steps - j) % t].axial_slice(slice_index))
            .collect();
        Self::new(slices, [nx, ny], last_frame)
    }

    pub fn n_steps(&self) -> usize {
        self.slices.len()
    }

    /// Each slice minus the per-pixel mean over the steps, divided by the RMS
    /// of that difference: the temporal change with the static anatomy removed.
    pub(crate) fn deviations(&self) -> Vec<f64> {
        let n = self.dims[0] * self.dims[1];
        let steps = self.slices.len() as f64;
        let mean: Vec<f64> = (0..n)
            .map(|i| self.slices.iter().map(|s| s[i]).sum::<f64>() / steps)
            .collect();
        let mut out: Vec<f64> = self
            .slices
            .iter()
            .flat_map(|s| s.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
        if rms > 0.0 {
            out.iter_mut().for_each(|v| *v /= rms);
        }
        out
    }

    /// Drops the oldest slice and prepends `slice` as frame `frame`.
    pub(crate) fn advanced(&self, slice: Vec<f64>, frame: usize) -> Self {
        let mut slices = Vec::with_capacity(self.slices.len());
        slices.push(slice);
        slices.extend(self.slices[..self.slices.len() - 1].iter().cloned());
        Self {
            slices,
            dims: self.dims,
            last_frame: frame,
        }
    }
}

/// Diagonal Gaussian posterior and a code drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
}

/// `z = μ + ε⊙σ`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != sigma.len() || mu.len() != eps.len() {
        return Err(Error::InvalidArgument(format!(
            "reparameterize lengths differ: mu {}, sigma {}, eps {}",
            mu.len(),
            sigma.len(),
            eps.len()
        )));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + e * s)
        .collect())
}

/// As [`reparameterize`] with `ε ~ N(0, I)` drawn from `rng`.
pub fn sample_latent<R: Rng + ?Sized>(mu: &[f64], sigma: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize(mu, sigma, &eps)
}

/// KL divergence of `N(μ, diag σ²)` from `N(0, I)`:
/// `½ Σ (μ² + σ² − 1 − ln σ²)`.
pub fn kl_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "kl_gaussian: {} means, {} deviations",
            mu.len(),
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "kl_gaussian needs sigma > 0, got {s}"
        )));
    }
    Ok(kl_value(mu, sigma))
}

/// One training example: reconstruct frame `target_frame` from the reference.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub iseq: SliceSequence,
    pub vref: Volume,
    pub vt: Volume,
    /// Field from the reference onto `target_frame` (registered or ground truth).
    pub dvf: DisplacementField,
    pub target_frame: usize,
}

/// Samples from one or more periodic cycles sharing a lattice and period.
#[derive(Debug, Clone)]
pub struct MotionDataset {
    pub samples: Vec<TrainSample>,
    pub period: usize,
    pub reference: usize,
    pub slice_index: usize,
    pub n_steps: usize,
}

impl MotionDataset {
    /// One sample per non-reference frame `t`, conditioned on the slices of
    /// frames `t−1, …, t−n_steps`. `dvfs` holds one field per non-reference
    /// frame, matched by `to_frame`.
    pub fn from_cycle(
        frames: &[Volume],
        dvfs: &[DisplacementField],
        reference: usize,
        slice_index: usize,
        n_steps: usize,
    ) -> Result<Self> {
        let t_len = frames.len();
        if t_len < 2 || reference >= t_len {
            return Err(Error::InvalidArgument(format!(
                "cycle of {t_len} frames with reference {reference}"
            )));
        }
        let grid = frames[0].grid;
        for (t, f) in frames.iter().enumerate() {
            f.grid.ensure_same(&grid).map_err(|e| e.in_frame(t))?;
        }
        let mut samples = Vec::with_capacity(t_len - 1);
        for t in (0..t_len).filter(|t| *t != reference) {
            let dvf = dvfs.iter().find(|d| d.to_frame == t).ok_or_else(|| {
                Error::InvalidArgument("no displacement field for this frame".into()).in_frame(t)
            })?;
            dvf.grid.ensure_same(&grid).map_err(|e| e.in_frame(t))?;
            let last = (t + t_len - 1) % t_len;
            samples.push(TrainSample {
                iseq: SliceSequence::from_cycle(frames, slice_index, last, n_steps)?,
                vref: frames[reference].clone(),
                vt: frames[t].clone(),
                dvf: dvf.clone(),
                target_frame: t,
            });
        }
        Ok(Self {
            samples,
            period: t_len,
            reference,
            slice_index,
            n_steps,
        })
    }

    /// Appends the samples of another cycle with the same layout.
    pub fn extend(&mut self, other: MotionDataset) -> Result<()> {
        if other.period != self.period
            || other.reference != self.reference
            || other.slice_index != self.slice_index
            || other.n_steps != self.n_steps
        {
            return Err(Error::InvalidArgument(
                "datasets differ in period, reference, slice or history length".into(),
            ));
        }
        if let (Some(a), Some(b)) = (self.samples.first(), other.samples.first()) {
            a.vref.grid.ensure_same(&b.vref.grid)?;
        }
        self.samples.extend(other.samples);
        Ok(())
    }

    pub fn sequences(&self) -> Vec<SliceSequence> {
        self.samples.iter().map(|s| s.iseq.clone()).collect()
    }
}
