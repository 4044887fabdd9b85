//! 2D+t masked autoencoder over slice sequences.
//!
//! Every slice is cut into `P×P` patches; the tokens of all time steps form
//! one `[N, P²]` matrix. Masked tokens are zeroed and flagged by an extra
//! input column. The encoder is a token embedding with a learned position
//! table followed by a token-mixing and a channel-mixing residual layer. The
//! reconstruction head starts at zero and the loss counts masked pixels only.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SliceSequence;
use crate::autodiff::{init, Adam, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    /// Square patch side in pixels.
    pub patch: usize,
    /// Fraction of tokens hidden per sequence, in `[0, 1)`.
    pub mask_ratio: f64,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            mask_ratio: 0.75,
            embed_dim: 16,
            epochs: 50,
            lr: 5e-3,
            seed: 0,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidArgument(format!(
                "mask ratio must be in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.patch == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "patch and embed_dim must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel {
    pub config: MaeConfig,
    pub n_steps: usize,
    /// `[X, Y]` of the slices the model was built for.
    pub slice_dims: [usize; 2],
    pub params: ParamSet,
    pub trained: bool,
}

/// Splits a sequence into `[N, P²]` tokens ordered by time, then patch row,
/// then patch column.
pub fn patchify(seq: &SliceSequence, patch: usize) -> Result<Vec<f64>> {
    let [nx, ny] = seq.dims;
    if patch == 0 || nx % patch != 0 || ny % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "slices {nx}×{ny} are not divisible into {patch}×{patch} patches"
        )));
    }
    let mut out = Vec::with_capacity(seq.slices.len() * nx * ny);
    for s in &seq.slices {
        for py in 0..ny / patch {
            for px in 0..nx / patch {
                for yy in 0..patch {
                    let row = (py * patch + yy) * nx + px * patch;
                    out.extend_from_slice(&s[row..row + patch]);
                }
            }
        }
    }
    Ok(out)
}

impl MaeModel {
    pub fn new(config: MaeConfig, n_steps: usize, slice_dims: [usize; 2]) -> Result<Self> {
        config.validate()?;
        let p = config.patch;
        if n_steps == 0
            || !slice_dims[0].is_multiple_of(p)
            || !slice_dims[1].is_multiple_of(p)
            || slice_dims.contains(&0)
        {
            return Err(Error::InvalidArgument(format!(
                "{n_steps} steps of {slice_dims:?} slices do not tile into {p}×{p} patches"
            )));
        }
        let n = Self::token_count_for(n_steps, slice_dims, p);
        let (px, e) = (p * p, config.embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        params.insert(
            "mae.embed.w".into(),
            init::dense_weight(&mut rng, px + 1, e),
        );
        params.insert("mae.embed.b".into(), Tensor::zeros(&[e]));
        let pos = init::xavier(&mut rng, &[n, e], n, e)
            .into_data()
            .iter()
            .map(|v| 0.1 * v)
            .collect();
        params.insert("mae.pos".into(), Tensor::new(vec![n, e], pos)?);
        params.insert("mae.mix_t.w".into(), init::dense_weight(&mut rng, n, n));
        params.insert("mae.mix_t.b".into(), Tensor::zeros(&[n]));
        params.insert("mae.mix_c.w".into(), init::dense_weight(&mut rng, e, e));
        params.insert("mae.mix_c.b".into(), Tensor::zeros(&[e]));
        params.insert("mae.head.w".into(), Tensor::zeros(&[px, e]));
        params.insert("mae.head.b".into(), Tensor::zeros(&[px]));
        let f = e * n_steps;
        params.insert("mae.feat.scale".into(), Tensor::filled(&[1, f], 1.0));
        Ok(Self {
            config,
            n_steps,
            slice_dims,
            params,
            trained: false,
        })
    }

    fn token_count_for(n_steps: usize, dims: [usize; 2], p: usize) -> usize {
        n_steps * (dims[0] / p) * (dims[1] / p)
    }

    pub fn token_count(&self) -> usize {
        Self::token_count_for(self.n_steps, self.slice_dims, self.config.patch)
    }

    /// Per-step token means, concatenated over the steps.
    pub fn feature_len(&self) -> usize {
        self.config.embed_dim * self.n_steps
    }

    fn check_sequence(&self, seq: &SliceSequence) -> Result<()> {
        if seq.n_steps() != self.n_steps || seq.dims != self.slice_dims {
            return Err(Error::shape(
                "mae",
                format!(
                    "sequence of {} {:?} slices for a model of {} {:?}",
                    seq.n_steps(),
                    seq.dims,
                    self.n_steps,
                    self.slice_dims
                ),
            ));
        }
        Ok(())
    }

    /// Encoder input `[N, P²+1]`: tokens with hidden ones zeroed, plus the
    /// hidden flag.
    fn input_tensor(&self, tokens: &[f64], hidden: &[bool]) -> Result<Tensor> {
        let px = self.config.patch * self.config.patch;
        let n = hidden.len();
        let mut data = Vec::with_capacity(n * (px + 1));
        for (t, h) in hidden.iter().enumerate() {
            if *h {
                data.extend(std::iter::repeat_n(0.0, px));
                data.push(1.0);
            } else {
                data.extend_from_slice(&tokens[t * px..(t + 1) * px]);
                data.push(0.0);
            }
        }
        Tensor::new(vec![n, px + 1], data)
    }

    /// Encoder on the tape; `frozen` binds the weights as constants.
    pub(crate) fn encoder_graph(
        &self,
        t: &mut Tape,
        params: &ParamSet,
        input: Var,
        frozen: bool,
    ) -> Result<Var> {
        let p = |t: &mut Tape, name: &str| {
            if frozen {
                t.frozen(params, name)
            } else {
                t.param(params, name)
            }
        };
        let (ew, eb, pos) = (p(t, "mae.embed.w")?, p(t, "mae.embed.b")?, p(t, "mae.pos")?);
        let (tw, tb) = (p(t, "mae.mix_t.w")?, p(t, "mae.mix_t.b")?);
        let (cw, cb) = (p(t, "mae.mix_c.w")?, p(t, "mae.mix_c.b")?);
        let e = t.dense(input, ew, eb)?;
        let e = t.add(e, pos)?;
        let h0 = t.relu(e);
        // token mixing acts across the N = steps × patches axis
        let ht = t.transpose(h0)?;
        let m = t.dense(ht, tw, tb)?;
        let m = t.relu(m);
        let m = t.transpose(m)?;
        let h1 = t.add(h0, m)?;
        let c = t.dense(h1, cw, cb)?;
        let c = t.relu(c);
        t.add(h1, c)
    }

    /// Masked-patch reconstruction loss on the tape.
    pub(crate) fn loss_graph(
        &self,
        t: &mut Tape,
        params: &ParamSet,
        seq: &SliceSequence,
        hidden: &[bool],
    ) -> Result<Var> {
        self.check_sequence(seq)?;
        let tokens = patchify(seq, self.config.patch)?;
        let n = self.token_count();
        let px = self.config.patch * self.config.patch;
        if hidden.len() != n {
            return Err(Error::shape(
                "mae",
                format!("{} mask flags for {n} tokens", hidden.len()),
            ));
        }
        let x = t.constant(self.input_tensor(&tokens, hidden)?);
        let h = self.encoder_graph(t, params, x, false)?;
        let (hw, hb) = (
            t.param(params, "mae.head.w")?,
            t.param(params, "mae.head.b")?,
        );
        let rec = t.dense(h, hw, hb)?;
        let target = t.constant(Tensor::new(vec![n, px], tokens)?);
        let pixel_mask = hidden
            .iter()
            .flat_map(|h| std::iter::repeat_n(*h, px))
            .collect();
        t.masked_mse(rec, target, pixel_mask)
    }

    /// Encoder output on an unmasked sequence, averaged over the patches of
    /// each time step and centered over the steps (`[E, steps]` flattened,
    /// step fastest), times the scale fitted at pretraining.
    pub fn features(&self, seq: &SliceSequence) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let f = self.features_graph(&mut t, seq)?;
        Ok(t.value(f).data().to_vec())
    }

    /// Frozen feature branch `[1, E]` on the tape.
    pub(crate) fn features_graph(&self, t: &mut Tape, seq: &SliceSequence) -> Result<Var> {
        self.check_sequence(seq)?;
        let tokens = patchify(seq, self.config.patch)?;
        let x = t.constant(self.input_tensor(&tokens, &vec![false; self.token_count()])?);
        let h = self.encoder_graph(t, &self.params, x, true)?;
        // average the patch tokens of each step, then subtract the mean over
        // steps so that only the temporal change remains:
        // [N, E] → [E, steps] → [1, E·steps]
        let n = self.token_count();
        let steps = self.n_steps;
        let per_step = n / steps;
        let mut avg = vec![-1.0 / n as f64; steps * n];
        for s in 0..steps {
            for v in &mut avg[s * n + s * per_step..s * n + (s + 1) * per_step] {
                *v += 1.0 / per_step as f64;
            }
        }
        let a = t.constant(Tensor::new(vec![self.n_steps, n], avg)?);
        let zero = t.constant(Tensor::zeros(&[self.n_steps]));
        let ht = t.transpose(h)?;
        let m = t.dense(ht, a, zero)?;
        let m = t.reshape(m, &[1, self.feature_len()])?;
        let scale = t.frozen(&self.params, "mae.feat.scale")?;
        t.mul(m, scale)
    }

    /// Sets the shared feature scale to the inverse RMS of the centered
    /// features over `sequences`, so the conditioning input is O(1).
    fn fit_feature_scale(&mut self, sequences: &[SliceSequence]) -> Result<()> {
        let f = self.feature_len();
        self.params
            .insert("mae.feat.scale".into(), Tensor::filled(&[1, f], 1.0));
        let feats = sequences
            .iter()
            .map(|s| self.features(s))
            .collect::<Result<Vec<_>>>()?;
        let count = (feats.len() * f) as f64;
        let rms = (feats.iter().flatten().map(|v| v * v).sum::<f64>() / count).sqrt();
        if rms > 0.0 {
            self.params
                .insert("mae.feat.scale".into(), Tensor::filled(&[1, f], 1.0 / rms));
        }
        Ok(())
    }

    /// Masked-patch loss for an explicit mask.
    pub fn masked_loss(&self, seq: &SliceSequence, hidden: &[bool]) -> Result<f64> {
        let mut t = Tape::new();
        let l = self.loss_graph(&mut t, &self.params, seq, hidden)?;
        Ok(t.scalar(l))
    }

    fn draw_mask(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let n = self.token_count();
        let k = ((self.config.mask_ratio * n as f64).round() as usize).min(n);
        let mut hidden = vec![false; n];
        for i in sample(rng, n, k) {
            hidden[i] = true;
        }
        hidden
    }
}

/// Pretrains a masked autoencoder; returns the model and the epoch-mean
/// masked-patch loss. With `mask_ratio = 0` there is nothing to reconstruct:
/// the untrained model and an empty history are returned with a warning.
pub fn pretrain_mae(sequences: &[SliceSequence], cfg: &MaeConfig) -> Result<(MaeModel, Vec<f64>)> {
    cfg.validate()?;
    let first = sequences
        .first()
        .ok_or_else(|| Error::InvalidArgument("no slice sequences to pretrain on".into()))?;
    let mut model = MaeModel::new(*cfg, first.n_steps(), first.dims)?;
    for s in sequences {
        model.check_sequence(s)?;
    }
    if model
        .draw_mask(&mut ChaCha8Rng::seed_from_u64(cfg.seed))
        .iter()
        .all(|h| !h)
    {
        log::warn!(
            "mask ratio {} hides no patch; masked autoencoder pretraining skipped",
            cfg.mask_ratio
        );
        return Ok((model, Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for seq in sequences {
            let hidden = model.draw_mask(&mut rng);
            sum += train_step(&mut model, &mut adam, seq, &hidden).map_err(|e| Error::Epoch {
                epoch,
                source: Box::new(e),
            })?;
        }
        history.push(sum / sequences.len() as f64);
    }
    model.fit_feature_scale(sequences)?;
    model.trained = true;
    Ok((model, history))
}

fn train_step(
    model: &mut MaeModel,
    adam: &mut Adam,
    seq: &SliceSequence,
    hidden: &[bool],
) -> Result<f64> {
    let mut t = Tape::new();
    let l = model.loss_graph(&mut t, &model.params, seq, hidden)?;
    let v = t.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite("masked autoencoder loss".into()));
    }
    let g = t.backward(l, None)?.params(&model.params);
    adam.step(&mut model.params, &g)?;
    Ok(v)
}
