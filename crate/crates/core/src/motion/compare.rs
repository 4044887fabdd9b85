//! Encoder-mode comparison against the classical registration baseline.

use serde::{Deserialize, Serialize};

use super::{
    predict_ahead, pretrain_mae, train_cvae, EncoderMode, MaeConfig, MotionDataset, SliceSequence,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cycle, CycleReport};
use crate::field::{Mask, Volume};
use crate::registration::{track_cycle, RegConfig};

pub const BASELINE_LABEL: &str = "Classical baseline";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Shared training settings; the encoder mode is overridden per row.
    pub train: TrainConfig,
    pub mae: MaeConfig,
    pub registration: RegConfig,
    pub percentile: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            mae: MaeConfig::default(),
            registration: RegConfig::default(),
            percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub label: String,
    pub report: CycleReport,
}

/// Trains one model per encoder mode on `train` and scores one-step-ahead
/// predictions on the evaluation cycle: the field of frame `t` is predicted
/// from the slices of frames `t−1, t−2, …`. The baseline registers the
/// evaluation cycle directly. Rows: Motion, MAE, Motion+MAE, baseline.
pub fn compare_methods(
    train: &MotionDataset,
    eval_frames: &[Volume],
    eval_masks: &[Mask],
    cfg: &CompareConfig,
) -> Result<Vec<MethodRow>> {
    if eval_frames.len() != train.period || eval_masks.len() != eval_frames.len() {
        return Err(Error::InvalidArgument(format!(
            "evaluation cycle has {} frames and {} masks, training period is {}",
            eval_frames.len(),
            eval_masks.len(),
            train.period
        )));
    }
    let m = train.reference;
    let (mae, _) = pretrain_mae(&train.sequences(), &cfg.mae)?;
    let mut rows = Vec::with_capacity(4);
    for mode in EncoderMode::ALL {
        let tc = TrainConfig {
            encoder_mode: mode,
            ..cfg.train
        };
        let (model, _) = train_cvae(train, &tc, Some(mae.clone()))?;
        let mut dvfs = Vec::with_capacity(eval_frames.len() - 1);
        for t in (0..eval_frames.len()).filter(|t| *t != m) {
            let last = (t + eval_frames.len() - 1) % eval_frames.len();
            let iseq =
                SliceSequence::from_cycle(eval_frames, train.slice_index, last, train.n_steps)?;
            let mut pred =
                predict_ahead(&model, &iseq, &eval_frames[m], 1).map_err(|e| e.in_frame(t))?;
            dvfs.push(pred.remove(0));
        }
        rows.push(MethodRow {
            label: mode.label().to_string(),
            report: evaluate_cycle(eval_masks, &eval_masks[m], &dvfs, cfg.percentile)?,
        });
    }
    let dvfs = track_cycle(eval_frames, m, &cfg.registration)?;
    rows.push(MethodRow {
        label: BASELINE_LABEL.to_string(),
        report: evaluate_cycle(eval_masks, &eval_masks[m], &dvfs, cfg.percentile)?,
    });
    Ok(rows)
}
