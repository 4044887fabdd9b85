//! CVAE architecture, objective and training loop.
//!
//! Shapes (batch of one, `C` conditioning features, `d` latent size):
//!
//! * conditioning: slice deviations from their temporal mean `[1, n, Y, X]`
//!   → two stride-2 conv2d, reference
//!   `[1, 1, Z, Y, X]` → two stride-2 conv3d, concatenated into a dense layer;
//!   optionally concatenated with frozen MAE token-mean features.
//! * posterior: `[1, 4, Z, Y, X]` (field in voxels ⊕ reference) → two stride-2
//!   conv3d → dense, concatenated with the conditioning into μ and σ heads.
//! * prior head: conditioning → dense → μ.
//! * decoder: `z ⊕ cond` → two dense layers → coarse `[1, 3, Z/f, Y/f, X/f]`,
//!   nearest-upsampled and refined by two conv3d, scaled by a learnable gain
//!   that starts at zero.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    EncoderMode, LatentCode, MaeModel, MotionDataset, SliceSequence, TrainSample, SIGMA_FLOOR,
};
use crate::autodiff::{
    gradient_check, init, Adam, GradCheckOptions, GradCheckReport, GradSet, ParamSet, Tape, Tensor,
    Var, WARP_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::field::{warp_volume, DisplacementField, Grid, Volume};
use crate::par;
use crate::registration::{similarity_on_tape, Similarity};

/// Channels of the hidden convolutions.
const SLICE_CH: usize = 8;
const VOL_CH: [usize; 2] = [4, 4];
const POST_CH: [usize; 2] = [4, 8];
const REFINE_CH: usize = 8;
/// Scale of the initial μ/σ head weights, so the untrained posterior sits
/// close to the prior.
const HEAD_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// KL weight after warm-up.
    pub beta_kl: f64,
    /// Fraction of epochs over which the KL weight ramps up linearly.
    pub warmup_frac: f64,
    pub lambda_smooth: f64,
    pub similarity: Similarity,
    /// Weight of the optional field-space MSE against the training fields.
    pub dvf_weight: f64,
    pub latent_dim: usize,
    pub encoder_mode: EncoderMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            lr: 2e-3,
            beta_kl: 0.01,
            warmup_frac: 0.2,
            lambda_smooth: 0.01,
            similarity: Similarity::Mse,
            dvf_weight: 0.0,
            latent_dim: 32,
            encoder_mode: EncoderMode::Motion,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return bad("epochs, batch_size and latent_dim must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("beta_kl", self.beta_kl),
            ("lambda_smooth", self.lambda_smooth),
            ("dvf_weight", self.dvf_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!(
                "warmup_frac must be in [0, 1], got {}",
                self.warmup_frac
            ));
        }
        Ok(())
    }

    /// KL weight used during `epoch` (0-based).
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let ramp = (self.warmup_frac * self.epochs as f64).ceil() as usize;
        if ramp == 0 {
            self.beta_kl
        } else {
            self.beta_kl * ((epoch + 1) as f64 / ramp as f64).min(1.0)
        }
    }
}

/// Sizes that fix the parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvaeArch {
    pub grid: Grid,
    pub n_steps: usize,
    /// `[X, Y]` of the conditioning slices.
    pub slice_dims: [usize; 2],
    pub latent_dim: usize,
    pub mode: EncoderMode,
    /// Frames per cycle; used to stamp predicted frames.
    pub period: usize,
    pub reference: usize,
    pub slice_index: usize,
    /// Decoder upsampling factor from the coarse field.
    pub coarse_factor: usize,
    pub motion_features: usize,
    pub mae_features: usize,
    pub hidden: usize,
}

fn half(n: usize) -> usize {
    // stride-2, kernel-3, pad-1 convolution output
    (n - 1) / 2 + 1
}

impl CvaeArch {
    pub fn new(
        grid: Grid,
        n_steps: usize,
        latent_dim: usize,
        mode: EncoderMode,
        period: usize,
        reference: usize,
        slice_index: usize,
        mae_features: usize,
    ) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let coarse_factor = [4, 2, 1]
            .into_iter()
            .find(|f| grid.dims.iter().all(|d| d % f == 0))
            .unwrap_or(1);
        let arch = Self {
            grid,
            n_steps,
            slice_dims: [nx, ny],
            latent_dim,
            mode,
            period,
            reference,
            slice_index,
            coarse_factor,
            motion_features: if mode.uses_motion() { 16 } else { 0 },
            mae_features: if mode.uses_mae() { mae_features } else { 0 },
            hidden: 32,
        };
        if n_steps == 0 || period == 0 || reference >= period || slice_index >= nz {
            return Err(Error::InvalidArgument(format!(
                "bad layout: {n_steps} steps, period {period}, reference {reference}, slice {slice_index} of {nz}"
            )));
        }
        if latent_dim == 0 || latent_dim > grid.len() / 64 {
            return Err(Error::InvalidArgument(format!(
                "latent dim {latent_dim} must be in 1..={} for a {nx}×{ny}×{nz} grid",
                grid.len() / 64
            )));
        }
        if mode.uses_mae() && mae_features == 0 {
            return Err(Error::MissingModel(mode.to_string()));
        }
        Ok(arch)
    }

    pub fn cond_len(&self) -> usize {
        self.motion_features + self.mae_features
    }

    /// Coarse decoder lattice `(z, y, x)`.
    fn coarse(&self) -> [usize; 3] {
        let [nx, ny, nz] = self.grid.dims;
        let f = self.coarse_factor;
        [nz / f, ny / f, nx / f]
    }

    fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let [nx, ny, nz] = self.grid.dims;
        let (h, d, c) = (self.hidden, self.latent_dim, self.cond_len());
        let conv = |p: &mut ParamSet,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    i: usize,
                    o: usize,
                    spatial: usize| {
            p.insert(
                format!("{name}.w"),
                init::conv_weight(rng, i, o, 3, spatial),
            );
            p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
        };
        let dense =
            |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, gain: f64| {
                let w = init::dense_weight(rng, i, o);
                let w = Tensor::new(
                    w.shape().to_vec(),
                    w.data().iter().map(|v| v * gain).collect(),
                )
                .expect("same shape");
                p.insert(format!("{name}.w"), w);
                p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
            };
        let vol_flat = VOL_CH[1] * half(half(nx)) * half(half(ny)) * half(half(nz));
        if self.mode.uses_motion() {
            conv(&mut p, &mut rng, "cond.s1", self.n_steps, SLICE_CH, 2);
            conv(&mut p, &mut rng, "cond.s2", SLICE_CH, SLICE_CH, 2);
            conv(&mut p, &mut rng, "cond.v1", 1, VOL_CH[0], 3);
            conv(&mut p, &mut rng, "cond.v2", VOL_CH[0], VOL_CH[1], 3);
            let slice_flat = SLICE_CH * half(half(nx)) * half(half(ny));
            dense(
                &mut p,
                &mut rng,
                "cond.fc",
                slice_flat + vol_flat,
                self.motion_features,
                1.0,
            );
        }
        conv(&mut p, &mut rng, "post.c1", 4, POST_CH[0], 3);
        conv(&mut p, &mut rng, "post.c2", POST_CH[0], POST_CH[1], 3);
        let post_flat = POST_CH[1] * half(half(nx)) * half(half(ny)) * half(half(nz));
        dense(&mut p, &mut rng, "post.fc", post_flat, h, 1.0);
        dense(&mut p, &mut rng, "head.mu", h + c, d, HEAD_INIT);
        dense(&mut p, &mut rng, "head.sigma", h + c, d, HEAD_INIT);
        // softplus(ln(e − 1)) = 1, so σ starts near the prior's
        p.insert(
            "head.sigma.b".into(),
            Tensor::filled(&[d], (std::f64::consts::E - 1.0).ln()),
        );
        dense(&mut p, &mut rng, "prior.fc", c, h, 1.0);
        dense(&mut p, &mut rng, "prior.mu", h, d, HEAD_INIT);
        let [cz, cy, cx] = self.coarse();
        dense(&mut p, &mut rng, "dec.fc1", d + c, h, 1.0);
        dense(&mut p, &mut rng, "dec.fc2", h, 3 * cz * cy * cx, 1.0);
        conv(&mut p, &mut rng, "dec.r1", 3, REFINE_CH, 3);
        conv(&mut p, &mut rng, "dec.r2", REFINE_CH, 3, 3);
        p.insert("dec.gain".into(), Tensor::zeros(&[1]));
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeModel {
    pub arch: CvaeArch,
    pub params: ParamSet,
    /// Frozen conditioning encoder for the MAE modes.
    pub mae: Option<MaeModel>,
    pub trained: bool,
    pub train_config: Option<TrainConfig>,
}

/// Per-epoch means over all samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// KL weight in effect.
    pub beta: f64,
    pub total: f64,
    pub rec: f64,
    pub sim: f64,
    pub smooth: f64,
    pub kl: f64,
    /// Predictive-head regression loss (not part of `total`).
    pub prior: f64,
}

/// Batch means of the objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvaeLoss {
    /// `rec + β·kl`.
    pub total: f64,
    /// `sim + λ·smooth`.
    pub rec: f64,
    pub sim: f64,
    pub smooth: f64,
    pub kl: f64,
    pub prior: f64,
}

/// Tape handles of the batch objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub rec: Var,
    pub sim: Var,
    pub smooth: Var,
    pub kl: Var,
    pub prior: Var,
    /// `total + prior (+ dvf_weight · field MSE)`, the quantity trained.
    pub objective: Var,
}

/// Graph builder bound to one parameter set.
struct Net<'a> {
    arch: &'a CvaeArch,
    params: &'a ParamSet,
    mae: Option<&'a MaeModel>,
}

impl Net<'_> {
    fn p(&self, t: &mut Tape, name: &str) -> Result<Var> {
        t.param(self.params, name)
    }

    fn conv(&self, t: &mut Tape, x: Var, name: &str, stride: usize, three_d: bool) -> Result<Var> {
        let w = self.p(t, &format!("{name}.w"))?;
        let b = self.p(t, &format!("{name}.b"))?;
        if three_d {
            t.conv3d(x, w, b, stride, 1)
        } else {
            t.conv2d(x, w, b, stride, 1)
        }
    }

    fn dense(&self, t: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = self.p(t, &format!("{name}.w"))?;
        let b = self.p(t, &format!("{name}.b"))?;
        t.dense(x, w, b)
    }

    fn flatten(t: &mut Tape, x: Var) -> Result<Var> {
        let n = t.value(x).len();
        t.reshape(x, &[1, n])
    }

    fn cond(&self, t: &mut Tape, iseq: &SliceSequence, vref: Var) -> Result<Var> {
        let mut parts = Vec::new();
        if self.arch.mode.uses_motion() {
            let [nx, ny] = self.arch.slice_dims;
            let s = t.constant(Tensor::new(
                vec![1, self.arch.n_steps, ny, nx],
                iseq.deviations(),
            )?);
            let s = self.conv(t, s, "cond.s1", 2, false)?;
            let s = t.relu(s);
            let s = self.conv(t, s, "cond.s2", 2, false)?;
            let s = t.relu(s);
            let s = Self::flatten(t, s)?;
            let v = self.conv(t, vref, "cond.v1", 2, true)?;
            let v = t.relu(v);
            let v = self.conv(t, v, "cond.v2", 2, true)?;
            let v = t.relu(v);
            let v = Self::flatten(t, v)?;
            let sv = t.concat(&[s, v], 1)?;
            let f = self.dense(t, sv, "cond.fc")?;
            parts.push(t.relu(f));
        }
        if self.arch.mode.uses_mae() {
            let mae = self
                .mae
                .ok_or_else(|| Error::MissingModel(self.arch.mode.to_string()))?;
            parts.push(mae.features_graph(t, iseq)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            t.concat(&parts, 1)
        }
    }

    fn posterior(&self, t: &mut Tape, dvf_vox: Var, vref: Var, cond: Var) -> Result<(Var, Var)> {
        let x = t.concat(&[dvf_vox, vref], 1)?;
        let x = self.conv(t, x, "post.c1", 2, true)?;
        let x = t.relu(x);
        let x = self.conv(t, x, "post.c2", 2, true)?;
        let x = t.relu(x);
        let x = Self::flatten(t, x)?;
        let h = self.dense(t, x, "post.fc")?;
        let h = t.relu(h);
        let hc = t.concat(&[h, cond], 1)?;
        let mu = self.dense(t, hc, "head.mu")?;
        let s = self.dense(t, hc, "head.sigma")?;
        let s = t.softplus(s);
        Ok((mu, t.add_scalar(s, SIGMA_FLOOR)))
    }

    fn prior(&self, t: &mut Tape, cond: Var) -> Result<Var> {
        let h = self.dense(t, cond, "prior.fc")?;
        let h = t.relu(h);
        self.dense(t, h, "prior.mu")
    }

    /// Field `[3, Z, Y, X]` in millimetres.
    fn decode(&self, t: &mut Tape, z: Var, cond: Var) -> Result<Var> {
        let zc = t.concat(&[z, cond], 1)?;
        let h = self.dense(t, zc, "dec.fc1")?;
        let h = t.relu(h);
        let c = self.dense(t, h, "dec.fc2")?;
        let [cz, cy, cx] = self.arch.coarse();
        let c = t.reshape(c, &[1, 3, cz, cy, cx])?;
        let up = t.upsample(c, self.arch.coarse_factor, 3)?;
        let r = self.conv(t, up, "dec.r1", 1, true)?;
        let r = t.relu(r);
        let r = self.conv(t, r, "dec.r2", 1, true)?;
        let s = t.add(up, r)?;
        let gain = self.p(t, "dec.gain")?;
        let s = t.mul_scalar_var(s, gain)?;
        let s = t.scale(s, self.arch.grid.min_spacing());
        let [nx, ny, nz] = self.arch.grid.dims;
        t.reshape(s, &[3, nz, ny, nx])
    }
}

/// Volume as a `[1, 1, Z, Y, X]` tensor.
fn volume_input(v: &Volume) -> Result<Tensor> {
    let [nx, ny, nz] = v.grid.dims;
    Tensor::new(vec![1, 1, nz, ny, nx], v.values.clone())
}

/// Field in voxel units as a `[1, 3, Z, Y, X]` tensor.
fn field_input(d: &DisplacementField) -> Result<Tensor> {
    let [nx, ny, nz] = d.grid.dims;
    let n = d.grid.len();
    let mut data = d.to_channels();
    for c in 0..3 {
        for v in &mut data[c * n..(c + 1) * n] {
            *v /= d.grid.spacing[c];
        }
    }
    Tensor::new(vec![1, 3, nz, ny, nx], data)
}

impl CvaeModel {
    pub fn new(arch: CvaeArch, mae: Option<MaeModel>, seed: u64) -> Result<Self> {
        if arch.mode.uses_mae() {
            let m = mae
                .as_ref()
                .ok_or_else(|| Error::MissingModel(arch.mode.to_string()))?;
            if m.feature_len() != arch.mae_features
                || m.n_steps != arch.n_steps
                || m.slice_dims != arch.slice_dims
            {
                return Err(Error::shape(
                    "cvae",
                    "masked autoencoder does not match the model layout",
                ));
            }
        }
        let params = arch.init_params(seed)?;
        Ok(Self {
            arch,
            params,
            mae: if arch.mode.uses_mae() { mae } else { None },
            trained: false,
            train_config: None,
        })
    }

    fn net<'a>(&'a self, params: &'a ParamSet) -> Net<'a> {
        Net {
            arch: &self.arch,
            params,
            mae: self.mae.as_ref(),
        }
    }

    fn check_inputs(&self, iseq: &SliceSequence, vref: &Volume) -> Result<()> {
        vref.grid.ensure_same(&self.arch.grid)?;
        if iseq.n_steps() != self.arch.n_steps || iseq.dims != self.arch.slice_dims {
            return Err(Error::shape(
                "cvae",
                format!(
                    "{} slices of {:?} for a model of {} slices of {:?}",
                    iseq.n_steps(),
                    iseq.dims,
                    self.arch.n_steps,
                    self.arch.slice_dims
                ),
            ));
        }
        Ok(())
    }

    /// Objective of one sample on the tape.
    fn sample_graph(
        &self,
        t: &mut Tape,
        params: &ParamSet,
        s: &TrainSample,
        eps: &[f64],
        cfg: &TrainConfig,
    ) -> Result<[Var; 6]> {
        self.check_inputs(&s.iseq, &s.vref)?;
        s.vt.grid.ensure_same(&self.arch.grid)?;
        s.dvf.grid.ensure_same(&self.arch.grid)?;
        let d = self.arch.latent_dim;
        if eps.len() != d {
            return Err(Error::shape(
                "cvae",
                format!("{} noise values for latent dim {d}", eps.len()),
            ));
        }
        let net = self.net(params);
        let grid = &self.arch.grid;
        let vref = t.constant(volume_input(&s.vref)?);
        let vt = t.constant(volume_input(&s.vt)?);
        let dvf_in = t.constant(field_input(&s.dvf)?);
        let cond = net.cond(t, &s.iseq, vref)?;
        let (mu, sigma) = net.posterior(t, dvf_in, vref, cond)?;
        let e = t.constant(Tensor::new(vec![1, d], eps.to_vec())?);
        let es = t.mul(e, sigma)?;
        let z = t.add(mu, es)?;
        let u = net.decode(t, z, cond)?;
        let warped = t.warp(vref, u, grid)?;
        let radius = match cfg.similarity {
            Similarity::Mse => 0,
            Similarity::Lncc { window } => window / 2,
        };
        let sim = similarity_on_tape(t, warped, vt, grid.dims, cfg.similarity, radius)?;
        let smooth = t.smoothness(u, grid)?;
        let reg = t.scale(smooth, cfg.lambda_smooth);
        let rec = t.add(sim, reg)?;
        let kl = t.kl_gaussian(mu, sigma)?;
        let mu_p = net.prior(t, cond)?;
        let mu_target = t.detach(mu);
        let prior = t.mse(mu_p, mu_target)?;
        let aux = if cfg.dvf_weight > 0.0 {
            let target = t.constant(Tensor::new(
                t.value(u).shape().to_vec(),
                s.dvf.to_channels(),
            )?);
            let m = t.mse(u, target)?;
            t.scale(m, cfg.dvf_weight)
        } else {
            t.constant(Tensor::scalar(0.0))
        };
        Ok([rec, sim, smooth, kl, prior, aux])
    }

    /// Batch objective on the tape with KL weight `beta`; `eps[i]` is the
    /// reparameterization noise of sample `i`.
    pub fn loss_graph(
        &self,
        t: &mut Tape,
        params: &ParamSet,
        batch: &[TrainSample],
        eps: &[Vec<f64>],
        cfg: &TrainConfig,
        beta: f64,
    ) -> Result<LossVars> {
        if batch.is_empty() || eps.len() != batch.len() {
            return Err(Error::InvalidArgument(format!(
                "{} samples with {} noise vectors",
                batch.len(),
                eps.len()
            )));
        }
        let mut acc: Option<[Var; 6]> = None;
        for (s, e) in batch.iter().zip(eps) {
            let v = self.sample_graph(t, params, s, e, cfg)?;
            acc = Some(match acc {
                None => v,
                Some(a) => {
                    let mut out = a;
                    for k in 0..6 {
                        out[k] = t.add(a[k], v[k])?;
                    }
                    out
                }
            });
        }
        let inv = 1.0 / batch.len() as f64;
        let [rec, sim, smooth, kl, prior, aux] =
            acc.expect("nonempty batch").map(|v| t.scale(v, inv));
        let bkl = t.scale(kl, beta);
        let total = t.add(rec, bkl)?;
        let obj = t.add(total, prior)?;
        let objective = t.add(obj, aux)?;
        Ok(LossVars {
            total,
            rec,
            sim,
            smooth,
            kl,
            prior,
            objective,
        })
    }

    /// Conditioning features for this model's encoder mode.
    pub fn condition_features(&self, iseq: &SliceSequence, vref: &Volume) -> Result<Vec<f64>> {
        self.check_inputs(iseq, vref)?;
        let mut t = Tape::new();
        let v = t.constant(volume_input(vref)?);
        let c = self.net(&self.params).cond(&mut t, iseq, v)?;
        Ok(t.value(c).data().to_vec())
    }

    /// Predictive-head mean of the latent code.
    pub fn prior_mean(&self, iseq: &SliceSequence, vref: &Volume) -> Result<Vec<f64>> {
        let cond = self.condition_features(iseq, vref)?;
        let mut t = Tape::new();
        let c = t.constant(Tensor::new(vec![1, cond.len()], cond)?);
        let m = self.net(&self.params).prior(&mut t, c)?;
        Ok(t.value(m).data().to_vec())
    }
}

/// Posterior `(μ, σ)` of the latent code; `z` is set to `μ`.
pub fn encode(
    dvf: &DisplacementField,
    iseq: &SliceSequence,
    vref: &Volume,
    model: &CvaeModel,
) -> Result<LatentCode> {
    model.check_inputs(iseq, vref)?;
    dvf.grid.ensure_same(&model.arch.grid)?;
    let mut t = Tape::new();
    let net = model.net(&model.params);
    let v = t.constant(volume_input(vref)?);
    let d = t.constant(field_input(dvf)?);
    let cond = net.cond(&mut t, iseq, v)?;
    let (mu, sigma) = net.posterior(&mut t, d, v, cond)?;
    let mu = t.value(mu).data().to_vec();
    Ok(LatentCode {
        sigma: t.value(sigma).data().to_vec(),
        z: mu.clone(),
        mu,
    })
}

/// Field on the model grid from the reference onto `to_frame`.
pub fn decode(
    z: &[f64],
    cond: &[f64],
    model: &CvaeModel,
    to_frame: usize,
) -> Result<DisplacementField> {
    let a = &model.arch;
    if z.len() != a.latent_dim || cond.len() != a.cond_len() {
        return Err(Error::shape(
            "decode",
            format!(
                "z {} and cond {} for latent {} and cond {}",
                z.len(),
                cond.len(),
                a.latent_dim,
                a.cond_len()
            ),
        ));
    }
    let mut t = Tape::new();
    let zv = t.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let cv = t.constant(Tensor::new(vec![1, cond.len()], cond.to_vec())?);
    let u = model.net(&model.params).decode(&mut t, zv, cv)?;
    DisplacementField::from_channels(a.grid, t.value(u).data(), a.reference, to_frame)
}

/// Features for `mode` from whichever models supply them. Motion needs a
/// model with a motion branch; MAE takes `mae` or the model's own encoder.
pub fn condition_features(
    iseq: &SliceSequence,
    vref: &Volume,
    mode: EncoderMode,
    cvae: Option<&CvaeModel>,
    mae: Option<&MaeModel>,
) -> Result<Vec<f64>> {
    let missing = || Error::MissingModel(mode.to_string());
    let mut out = Vec::new();
    if mode.uses_motion() {
        let m = cvae
            .filter(|m| m.arch.mode.uses_motion())
            .ok_or_else(missing)?;
        let f = m.condition_features(iseq, vref)?;
        out.extend_from_slice(&f[..m.arch.motion_features]);
    }
    if mode.uses_mae() {
        let enc = mae
            .or_else(|| cvae.and_then(|m| m.mae.as_ref()))
            .ok_or_else(missing)?;
        out.extend(enc.features(iseq)?);
    }
    Ok(out)
}

/// Batch means of the objective terms at KL weight `cfg.beta_kl`.
pub fn cvae_loss(
    model: &CvaeModel,
    batch: &[TrainSample],
    cfg: &TrainConfig,
    eps: &[Vec<f64>],
) -> Result<CvaeLoss> {
    let mut t = Tape::new();
    let v = model.loss_graph(&mut t, &model.params, batch, eps, cfg, cfg.beta_kl)?;
    let loss = CvaeLoss {
        total: t.scalar(v.total),
        rec: t.scalar(v.rec),
        sim: t.scalar(v.sim),
        smooth: t.scalar(v.smooth),
        kl: t.scalar(v.kl),
        prior: t.scalar(v.prior),
    };
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("cvae loss".into()));
    }
    Ok(loss)
}

struct SampleStep {
    values: [f64; 6],
    grads: GradSet,
}

/// Trains a model on `data` with Adam. Samples are shuffled every epoch;
/// the per-sample gradients of a batch are averaged in sample order.
pub fn train_cvae(
    data: &MotionDataset,
    cfg: &TrainConfig,
    mae: Option<MaeModel>,
) -> Result<(CvaeModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    let first = data
        .samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let mode = cfg.encoder_mode;
    let mae = if mode.uses_mae() {
        let m = mae.ok_or_else(|| Error::MissingModel(mode.to_string()))?;
        if !m.trained {
            return Err(Error::Untrained("masked autoencoder".into()));
        }
        Some(m)
    } else {
        None
    };
    let arch = CvaeArch::new(
        first.vref.grid,
        data.n_steps,
        cfg.latent_dim,
        mode,
        data.period,
        data.reference,
        data.slice_index,
        mae.as_ref().map_or(0, MaeModel::feature_len),
    )?;
    let mut model = CvaeModel::new(arch, mae, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut adam = Adam::new(cfg.lr);
    let d = arch.latent_dim;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let beta = cfg.beta_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        for chunk in order.chunks(cfg.batch_size) {
            let eps: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .collect();
            let steps = par::map_indices(chunk.len(), |i| -> Result<SampleStep> {
                let mut t = Tape::new();
                let v = model.sample_graph(
                    &mut t,
                    &model.params,
                    &data.samples[chunk[i]],
                    &eps[i],
                    cfg,
                )?;
                let values = v.map(|x| t.scalar(x));
                let bkl = t.scale(v[3], beta);
                let o = t.add(v[0], bkl)?;
                let o = t.add(o, v[4])?;
                let o = t.add(o, v[5])?;
                let grads = t.backward(o, None)?.params(&model.params);
                Ok(SampleStep { values, grads })
            });
            let mut mean: GradSet = GradSet::new();
            let inv = 1.0 / chunk.len() as f64;
            for s in steps {
                let s = s.map_err(|e| Error::Epoch {
                    epoch,
                    source: Box::new(e),
                })?;
                if s.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Epoch {
                        epoch,
                        source: Box::new(Error::Diverged {
                            iteration: adam.steps() as usize,
                            reason: "non-finite loss".into(),
                        }),
                    });
                }
                for k in 0..6 {
                    sums[k] += s.values[k];
                }
                for (name, g) in s.grads {
                    let slot = mean.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                        *a += b * inv;
                    }
                }
            }
            adam.step(&mut model.params, &mean)
                .map_err(|e| Error::Epoch {
                    epoch,
                    source: Box::new(e),
                })?;
        }
        let n = data.samples.len() as f64;
        let [rec, sim, smooth, kl, prior, _] = sums.map(|s| s / n);
        history.push(EpochLoss {
            epoch,
            beta,
            total: rec + beta * kl,
            rec,
            sim,
            smooth,
            kl,
            prior,
        });
    }
    model.trained = true;
    model.train_config = Some(*cfg);
    Ok((model, history))
}

/// Forecasts `horizon` fields after `iseq.last_frame` with the predictive
/// head (`ε = 0`). Each later step conditions on the axial slice of the
/// reference warped by the previous prediction.
pub fn predict_ahead(
    model: &CvaeModel,
    iseq: &SliceSequence,
    vref: &Volume,
    horizon: usize,
) -> Result<Vec<DisplacementField>> {
    if !model.trained {
        return Err(Error::Untrained("cvae".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let a = &model.arch;
    let mut seq = iseq.clone();
    let mut out = Vec::with_capacity(horizon);
    for step in 0..horizon {
        let frame = (seq.last_frame + 1) % a.period;
        let cond = model.condition_features(&seq, vref)?;
        let mu = model.prior_mean(&seq, vref)?;
        let dvf = decode(&mu, &cond, model, frame)?;
        if step + 1 < horizon {
            let slice = warp_volume(vref, &dvf)?.axial_slice(a.slice_index);
            seq = seq.advanced(slice, frame);
        }
        out.push(dvf);
    }
    Ok(out)
}

/// Finite-difference check of the batch `total` through every CVAE
/// parameter on a 6³ toy cycle (warp included, so the tolerance is the
/// warp one). The decoder gain is set nonzero so the warp path is live.
pub fn cvae_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let grid = Grid::cube(6, 1.0)?;
    let frames = 4;
    let base = Volume::from_fn(grid, |p| {
        (p[0] * 0.9).sin() + (p[1] * 0.6 + 0.2).cos() * (p[2] * 0.8).sin()
    });
    let dvfs: Vec<DisplacementField> = (1..frames)
        .map(|t| {
            let a = 0.3 * (std::f64::consts::TAU * t as f64 / frames as f64).sin();
            DisplacementField::from_fn(grid, 0, t, move |p| {
                [a * (p[1] * 0.7).cos(), 0.5 * a, -a * (p[0] * 0.5).sin()]
            })
        })
        .collect();
    let mut vols = vec![base.clone()];
    for d in &dvfs {
        vols.push(warp_volume(&base, d)?);
    }
    let data = MotionDataset::from_cycle(&vols, &dvfs, 0, 3, 2)?;
    let cfg = TrainConfig {
        latent_dim: 3,
        lambda_smooth: 0.1,
        beta_kl: 0.5,
        seed,
        ..Default::default()
    };
    let arch = CvaeArch::new(grid, 2, 3, EncoderMode::Motion, frames, 0, 3, 0)?;
    let mut model = CvaeModel::new(arch, None, seed)?;
    model
        .params
        .insert("dec.gain".into(), Tensor::filled(&[1], 0.7));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = &data.samples[1..2];
    let eps = vec![(0..3)
        .map(|_| rng.sample(StandardNormal))
        .collect::<Vec<f64>>()];
    // `total` rather than the trained objective: the predictive head
    // regresses a detached posterior mean, invisible to central differences
    gradient_check(
        |t, p| {
            Ok(model
                .loss_graph(t, p, batch, &eps, &cfg, cfg.beta_kl)?
                .total)
        },
        &model.params,
        GradCheckOptions {
            tolerance: WARP_TOLERANCE,
            max_coords: Some(5),
            ..Default::default()
        },
    )
}
