use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::mesh::marching_cubes;
use super::metrics::{dice, hausdorff_mm, mean_surface_distance};
use crate::error::{Error, Result};
use crate::field::{warp_mask, DisplacementField, Mask};
use crate::par;

pub const FRAME_CSV_HEADER: &str = "frame,dice,hd_mm,hd95_mm,msd_mm,area_mm2";

/// Propagated-mask metrics for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame: usize,
    pub dice: f64,
    pub hd_mm: f64,
    /// Percentile Hausdorff distance (95th unless configured otherwise).
    pub hd95_mm: f64,
    pub msd_mm: f64,
    /// Surface area of the propagated mask's mesh.
    pub area_mm2: f64,
}

/// Sample mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    /// `mean ± std` with three decimals, e.g. `0.880 ± 0.027`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub dice: MeanStd,
    pub hd_mm: MeanStd,
    pub hd95_mm: MeanStd,
    pub msd_mm: MeanStd,
    pub area_mm2: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub frames: Vec<FrameReport>,
    pub summary: CycleSummary,
}

impl CycleReport {
    pub fn from_frames(frames: Vec<FrameReport>) -> Self {
        let col =
            |f: fn(&FrameReport) -> f64| MeanStd::of(&frames.iter().map(f).collect::<Vec<_>>());
        let summary = CycleSummary {
            dice: col(|r| r.dice),
            hd_mm: col(|r| r.hd_mm),
            hd95_mm: col(|r| r.hd95_mm),
            msd_mm: col(|r| r.msd_mm),
            area_mm2: col(|r| r.area_mm2),
        };
        Self { frames, summary }
    }

    /// One row per frame under [`FRAME_CSV_HEADER`].
    pub fn frames_csv(&self) -> String {
        let mut s = String::from(FRAME_CSV_HEADER);
        s.push('\n');
        for r in &self.frames {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.frame, r.dice, r.hd_mm, r.hd95_mm, r.msd_mm, r.area_mm2
            );
        }
        s
    }

    /// Single `mean ± std` row with the same columns.
    pub fn summary_csv(&self) -> String {
        let m = &self.summary;
        format!(
            "{FRAME_CSV_HEADER}\nmean ± std,{},{},{},{},{}\n",
            m.dice, m.hd_mm, m.hd95_mm, m.msd_mm, m.area_mm2
        )
    }
}

/// Table with one row per method: `method,dice,hd_mm`, each cell `mean ± std`.
pub fn method_table_csv(rows: &[(String, CycleSummary)]) -> String {
    let mut s = String::from("method,dice,hd_mm,hd95_mm\n");
    for (name, m) in rows {
        let _ = writeln!(s, "{name},{},{},{}", m.dice, m.hd_mm, m.hd95_mm);
    }
    s
}

/// Metrics of one predicted mask against ground truth.
pub fn frame_report(
    frame: usize,
    predicted: &Mask,
    truth: &Mask,
    percentile: f64,
) -> Result<FrameReport> {
    let report = FrameReport {
        frame,
        dice: dice(predicted, truth)?,
        hd_mm: hausdorff_mm(predicted, truth, 100.0)?,
        hd95_mm: hausdorff_mm(predicted, truth, percentile)?,
        msd_mm: mean_surface_distance(predicted, truth)?,
        area_mm2: marching_cubes(predicted).area(),
    };
    Ok(report)
}

/// Propagates `ref_mask` with each field (threshold 0.5) and scores it against
/// the ground-truth mask of the field's target frame. Rows follow `dvfs`.
pub fn evaluate_cycle(
    gt_masks: &[Mask],
    ref_mask: &Mask,
    dvfs: &[DisplacementField],
    percentile: f64,
) -> Result<CycleReport> {
    if gt_masks.is_empty() || dvfs.len() + 1 != gt_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth masks need {} fields, got {}",
            gt_masks.len(),
            gt_masks.len().saturating_sub(1),
            dvfs.len()
        )));
    }
    let mut seen = vec![false; gt_masks.len()];
    for d in dvfs {
        if d.to_frame >= gt_masks.len() || seen[d.to_frame] {
            return Err(Error::InvalidArgument(format!(
                "field targets frame {} twice or out of range",
                d.to_frame
            )));
        }
        seen[d.to_frame] = true;
    }
    let rows = par::map_indices(dvfs.len(), |i| {
        let d = &dvfs[i];
        let t = d.to_frame;
        warp_mask(ref_mask, d, 0.5)
            .and_then(|p| frame_report(t, &p, &gt_masks[t], percentile))
            .map_err(|e| e.in_frame(t))
    });
    let frames = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CycleReport::from_frames(frames))
}
