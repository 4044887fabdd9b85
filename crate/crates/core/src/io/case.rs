//! Case directories: `manifest.json` plus raw arrays for frames, masks,
//! ground-truth fields and the axial slice stack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::raw::{
    read_dvf, read_mask, read_slices, read_volume, write_dvf, write_mask, write_slices,
    write_volume,
};
use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Grid, Mask, Vec3, Volume};
use crate::phantom::{PhantomCase, PhantomConfig};

pub const CASE_VERSION: &str = "1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic { config: PhantomConfig },
    External { source: String },
}

/// Paths are relative to the case directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub version: String,
    pub subject: String,
    pub provenance: Provenance,
    pub dims: [usize; 3],
    pub spacing_mm: Vec3,
    pub origin_mm: Vec3,
    /// Frames per cycle (`T`).
    pub frames: usize,
    pub reference_frame: usize,
    pub slice_index: usize,
    pub frame_paths: Vec<String>,
    pub mask_paths: Vec<String>,
    /// Ground-truth fields from the reference, one per other frame; empty
    /// when none are known.
    pub dvf_paths: Vec<String>,
    pub slices_path: String,
    /// Acquisitions (`P`), respiratory cycles (`k`) and subjects (`S`) behind
    /// the case; bookkeeping only.
    pub acquisitions: usize,
    pub cycles: usize,
    pub subjects: usize,
}

impl CaseManifest {
    pub fn grid(&self) -> Result<Grid> {
        Grid::with_origin(self.dims, self.spacing_mm, self.origin_mm)
    }
}

/// A loaded and validated case.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub manifest: CaseManifest,
    pub frames: Vec<Volume>,
    pub masks: Vec<Mask>,
    /// Empty or one field per non-reference frame, in frame order.
    pub gt_dvfs: Vec<DisplacementField>,
    pub slices: Vec<Vec<f64>>,
}

impl CaseData {
    pub fn grid(&self) -> Grid {
        self.frames[0].grid
    }

    pub fn reference(&self) -> usize {
        self.manifest.reference_frame
    }

    pub fn slice_index(&self) -> usize {
        self.manifest.slice_index
    }
}

/// `dvf_007` for the field onto frame 7.
pub fn dvf_file_name(to_frame: usize) -> String {
    format!("dvf_{to_frame:03}")
}

/// Writes a phantom case; returns its manifest.
pub fn write_case(dir: &Path, case: &PhantomCase, subject: &str) -> Result<CaseManifest> {
    let t = case.frames.len();
    let name = |kind: &str, i: usize| format!("{kind}s/{kind}_{i:03}.hdr");
    let manifest = CaseManifest {
        version: CASE_VERSION.into(),
        subject: subject.into(),
        provenance: Provenance::Synthetic {
            config: case.config,
        },
        dims: case.grid.dims,
        spacing_mm: case.grid.spacing,
        origin_mm: case.grid.origin,
        frames: t,
        reference_frame: case.reference(),
        slice_index: case.slice_index,
        frame_paths: (0..t).map(|i| name("frame", i)).collect(),
        mask_paths: (0..t).map(|i| name("mask", i)).collect(),
        dvf_paths: case
            .gt_dvfs
            .iter()
            .map(|d| format!("dvfs/{}.hdr", dvf_file_name(d.to_frame)))
            .collect(),
        slices_path: "slices.hdr".into(),
        acquisitions: 1,
        cycles: 1,
        subjects: 1,
    };
    for (i, f) in case.frames.iter().enumerate() {
        write_volume(&dir.join(&manifest.frame_paths[i]), f)?;
        write_mask(&dir.join(&manifest.mask_paths[i]), &case.masks[i])?;
    }
    for (p, d) in manifest.dvf_paths.iter().zip(&case.gt_dvfs) {
        write_dvf(&dir.join(p), d)?;
    }
    let [nx, ny, _] = case.grid.dims;
    write_slices(&dir.join(&manifest.slices_path), &case.slices(), [nx, ny])?;
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads a case and checks every file against the manifest.
pub fn read_case(dir: &Path) -> Result<CaseData> {
    let mpath = dir.join(MANIFEST);
    let manifest: CaseManifest = read_json(&mpath)?;
    let bad = |m: String| Error::format(&mpath, m);
    if manifest.version != CASE_VERSION {
        return Err(bad(format!(
            "case version {} (expected {CASE_VERSION})",
            manifest.version
        )));
    }
    let t = manifest.frames;
    let m = manifest.reference_frame;
    if t < 2 || m >= t || manifest.slice_index >= manifest.dims[2] {
        return Err(bad(format!(
            "{t} frames, reference {m}, slice {}",
            manifest.slice_index
        )));
    }
    if manifest.frame_paths.len() != t || manifest.mask_paths.len() != t {
        return Err(bad(format!(
            "{} frame and {} mask paths for {t} frames",
            manifest.frame_paths.len(),
            manifest.mask_paths.len()
        )));
    }
    if !manifest.dvf_paths.is_empty() && manifest.dvf_paths.len() != t - 1 {
        return Err(bad(format!(
            "{} field paths for {t} frames",
            manifest.dvf_paths.len()
        )));
    }
    let grid = manifest.grid()?;
    let mut frames = Vec::with_capacity(t);
    let mut masks = Vec::with_capacity(t);
    for i in 0..t {
        let f = read_volume(&dir.join(&manifest.frame_paths[i])).map_err(|e| e.in_frame(i))?;
        f.grid.ensure_same(&grid).map_err(|e| e.in_frame(i))?;
        let k = read_mask(&dir.join(&manifest.mask_paths[i])).map_err(|e| e.in_frame(i))?;
        k.grid.ensure_same(&grid).map_err(|e| e.in_frame(i))?;
        frames.push(f);
        masks.push(k);
    }
    let mut gt_dvfs = Vec::with_capacity(manifest.dvf_paths.len());
    let others = (0..t).filter(|i| *i != m);
    for (p, i) in manifest.dvf_paths.iter().zip(others) {
        let d = read_dvf(&dir.join(p)).map_err(|e| e.in_frame(i))?;
        d.grid.ensure_same(&grid).map_err(|e| e.in_frame(i))?;
        if d.from_frame != m || d.to_frame != i {
            return Err(bad(format!(
                "{p} maps {} → {}, expected {m} → {i}",
                d.from_frame, d.to_frame
            )));
        }
        gt_dvfs.push(d);
    }
    let (slices, dims) = read_slices(&dir.join(&manifest.slices_path))?;
    if dims != [grid.dims[0], grid.dims[1]] || slices.len() != t {
        return Err(bad(format!(
            "slice stack {dims:?} × {} does not match the frames",
            slices.len()
        )));
    }
    if let Some(i) = (0..t).find(|i| slices[*i] != frames[*i].axial_slice(manifest.slice_index)) {
        return Err(bad(format!(
            "slice stack differs from frame {i} at slice {}",
            manifest.slice_index
        )));
    }
    Ok(CaseData {
        manifest,
        frames,
        masks,
        gt_dvfs,
        slices,
    })
}

/// Writes each field as `dir/dvf_<to>.hdr/.raw`.
pub fn write_dvf_dir(dir: &Path, dvfs: &[DisplacementField]) -> Result<()> {
    for d in dvfs {
        write_dvf(&dir.join(format!("{}.hdr", dvf_file_name(d.to_frame))), d)?;
    }
    Ok(())
}

/// Reads the field onto every frame other than `reference`, in frame order.
/// A missing or malformed file fails with the frame it belongs to.
pub fn read_dvf_dir(
    dir: &Path,
    frames: usize,
    reference: usize,
    grid: &Grid,
) -> Result<Vec<DisplacementField>> {
    let mut out = Vec::with_capacity(frames.saturating_sub(1));
    for t in (0..frames).filter(|t| *t != reference) {
        let path = dir.join(format!("{}.hdr", dvf_file_name(t)));
        let d = read_dvf(&path).map_err(|e| e.in_frame(t))?;
        d.grid.ensure_same(grid).map_err(|e| e.in_frame(t))?;
        if d.to_frame != t || d.from_frame != reference {
            return Err(Error::format(
                &path,
                format!(
                    "maps {} → {}, expected {reference} → {t}",
                    d.from_frame, d.to_frame
                ),
            )
            .in_frame(t));
        }
        out.push(d);
    }
    Ok(out)
}
