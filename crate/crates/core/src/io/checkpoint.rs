//! Parameter checkpoints: a directory holding `manifest.json` (model layout
//! and the name, shape and dtype of every tensor) and `params.bin` (the
//! tensors as little-endian f64, concatenated in manifest order).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, write_atomic, write_json};
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::motion::{CvaeArch, CvaeModel, EpochLoss, MaeConfig, MaeModel, TrainConfig};

pub const CHECKPOINT_VERSION: &str = "1";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const MAE_PREFIX: &str = "mae.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Cvae,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeMeta {
    pub config: MaeConfig,
    pub n_steps: usize,
    pub slice_dims: [usize; 2],
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeMeta {
    pub arch: CvaeArch,
    pub trained: bool,
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub kind: CheckpointKind,
    pub cvae: Option<CvaeMeta>,
    /// Masked autoencoder, standalone or embedded in a CVAE checkpoint; its
    /// tensors are the ones named `mae.*`.
    pub mae: Option<MaeMeta>,
    pub params: Vec<ParamEntry>,
}

fn mae_meta(m: &MaeModel) -> MaeMeta {
    MaeMeta {
        config: m.config,
        n_steps: m.n_steps,
        slice_dims: m.slice_dims,
        trained: m.trained,
    }
}

fn save(
    dir: &Path,
    kind: CheckpointKind,
    cvae: Option<CvaeMeta>,
    mae: Option<&MaeModel>,
    params: &[&ParamSet],
) -> Result<()> {
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for set in params {
        for (name, t) in set.iter() {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.into(),
        kind,
        cvae,
        mae: mae.map(mae_meta),
        params: entries,
    };
    write_atomic(&dir.join(PARAMS), &bytes)?;
    write_json(&dir.join(MANIFEST), &manifest)
}

fn load(dir: &Path, kind: CheckpointKind) -> Result<(CheckpointManifest, ParamSet)> {
    let mpath = dir.join(MANIFEST);
    let manifest: CheckpointManifest = read_json(&mpath)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &mpath,
            format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                manifest.version
            ),
        ));
    }
    if manifest.kind != kind {
        return Err(Error::format(
            &mpath,
            format!(
                "checkpoint holds a {:?} model, expected {kind:?}",
                manifest.kind
            ),
        ));
    }
    let ppath = dir.join(PARAMS);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 8)
        .sum();
    if bytes.len() != expected {
        return Err(Error::format(
            &ppath,
            format!(
                "expected {expected} bytes from the manifest, found {}",
                bytes.len()
            ),
        ));
    }
    let mut params = ParamSet::new();
    let mut offset = 0;
    for p in &manifest.params {
        if p.dtype != "f64" {
            return Err(Error::format(
                &mpath,
                format!("{}: unsupported dtype {}", p.name, p.dtype),
            ));
        }
        let n: usize = p.shape.iter().product();
        let data = bytes[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        if params
            .insert(p.name.clone(), Tensor::new(p.shape.clone(), data)?)
            .is_some()
        {
            return Err(Error::format(
                &mpath,
                format!("duplicate tensor {}", p.name),
            ));
        }
    }
    Ok((manifest, params))
}

/// Checks that `params` has exactly the names and shapes of `fresh`.
fn check_layout(fresh: &ParamSet, params: &ParamSet, path: &Path) -> Result<()> {
    let names = |s: &ParamSet| {
        s.iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    if names(fresh) != names(params) {
        return Err(Error::format(
            path,
            "tensor names or shapes do not match the model layout",
        ));
    }
    Ok(())
}

pub fn save_mae(dir: &Path, model: &MaeModel) -> Result<()> {
    save(
        dir,
        CheckpointKind::Mae,
        None,
        Some(model),
        &[&model.params],
    )
}

pub fn load_mae(dir: &Path) -> Result<MaeModel> {
    let (manifest, params) = load(dir, CheckpointKind::Mae)?;
    let path = dir.join(MANIFEST);
    let meta = manifest
        .mae
        .ok_or_else(|| Error::format(&path, "missing `mae` section"))?;
    mae_from(meta, params, &path)
}

fn mae_from(meta: MaeMeta, params: ParamSet, path: &Path) -> Result<MaeModel> {
    let mut m = MaeModel::new(meta.config, meta.n_steps, meta.slice_dims)?;
    check_layout(&m.params, &params, path)?;
    m.params = params;
    m.trained = meta.trained;
    Ok(m)
}

/// Saves the model; an embedded encoder is stored under its `mae.*` names.
pub fn save_cvae(dir: &Path, model: &CvaeModel) -> Result<()> {
    let meta = CvaeMeta {
        arch: model.arch,
        trained: model.trained,
        train_config: model.train_config,
    };
    let mut sets = vec![&model.params];
    if let Some(m) = &model.mae {
        sets.push(&m.params);
    }
    save(
        dir,
        CheckpointKind::Cvae,
        Some(meta),
        model.mae.as_ref(),
        &sets,
    )
}

pub fn load_cvae(dir: &Path) -> Result<CvaeModel> {
    let (manifest, mut params) = load(dir, CheckpointKind::Cvae)?;
    let path = dir.join(MANIFEST);
    let meta = manifest
        .cvae
        .ok_or_else(|| Error::format(&path, "missing `cvae` section"))?;
    let mae_params: ParamSet = {
        let names: Vec<String> = params
            .keys()
            .filter(|k| k.starts_with(MAE_PREFIX))
            .cloned()
            .collect();
        names
            .into_iter()
            .map(|k| (k.clone(), params.remove(&k).expect("listed")))
            .collect()
    };
    let mae = match manifest.mae {
        Some(m) => Some(mae_from(m, mae_params, &path)?),
        None if mae_params.is_empty() => None,
        None => {
            return Err(Error::format(
                &path,
                "`mae.*` tensors without an `mae` section",
            ))
        }
    };
    let mut model = CvaeModel::new(meta.arch, mae, 0)?;
    check_layout(&model.params, &params, &path)?;
    model.params = params;
    model.trained = meta.trained;
    model.train_config = meta.train_config;
    Ok(model)
}

/// `epoch,beta,total,rec,sim,smooth,kl,prior`, full precision.
pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,beta,total,rec,sim,smooth,kl,prior\n");
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            h.epoch, h.beta, h.total, h.rec, h.sim, h.smooth, h.kl, h.prior
        );
    }
    s
}

/// `epoch,masked_mse`.
pub fn mae_history_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,masked_mse\n");
    for (e, v) in history.iter().enumerate() {
        let _ = writeln!(s, "{e},{v}");
    }
    s
}
