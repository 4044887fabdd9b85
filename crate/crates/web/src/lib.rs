//! Browser demo over the core crate. The page (`www/index.html`) drives a
//! [`Demo`]: browse the phantom cycle, register a frame to the reference,
//! and mesh a propagated mask.
//!
//! Images are returned as RGBA bytes, row-major with X across, ready for
//! `ImageData`.

use lamotion::eval::{dice, marching_cubes, marching_cubes_smoothed};
use lamotion::field::{warp_mask, DisplacementField, Mask, Volume};
use lamotion::phantom::{endpoint_error, generate_case, PhantomCase, PhantomConfig};
use lamotion::registration::{register_pair, RegConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: lamotion::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Outcome of registering one frame to the reference.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct RegOutcome {
    pub frame: usize,
    /// Dice of the unwarped reference mask against the frame's mask.
    pub dice_before: f64,
    pub dice_after: f64,
    /// Mean endpoint error against the analytic field inside the wall, mm.
    pub mean_epe_mm: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Triangle count and area of the reference and propagated surfaces.
#[wasm_bindgen]
#[derive(Debug, Clone, Copy)]
pub struct SurfaceStats {
    pub triangles: usize,
    pub area_mm2: f64,
    pub warped_triangles: usize,
    pub warped_area_mm2: f64,
}

#[wasm_bindgen]
pub struct Demo {
    case: PhantomCase,
    /// Latest registration result per frame.
    fields: Vec<Option<DisplacementField>>,
}

#[wasm_bindgen]
impl Demo {
    /// Cubic phantom with `n` voxels per side.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, frames: usize, seed: u64) -> Result<Demo, JsError> {
        let cfg = PhantomConfig {
            dims: [n; 3],
            frames,
            seed,
            ..PhantomConfig::default()
        };
        let case = generate_case(&cfg).map_err(js_err)?;
        Ok(Demo {
            fields: vec![None; case.frames.len()],
            case,
        })
    }

    pub fn frames(&self) -> usize {
        self.case.frames.len()
    }

    pub fn width(&self) -> usize {
        self.case.grid.dims[0]
    }

    pub fn height(&self) -> usize {
        self.case.grid.dims[1]
    }

    pub fn depth(&self) -> usize {
        self.case.grid.dims[2]
    }

    /// Axial slice `z` of frame `t` in grey with the wall outline in red.
    /// Once frame `t` has been registered, the propagated reference outline
    /// is drawn in green.
    pub fn slice_rgba(&self, t: usize, z: usize) -> Result<Vec<u8>, JsError> {
        self.check(t, z)?;
        let warped = match &self.fields[t] {
            Some(d) => {
                Some(warp_mask(&self.case.masks[self.case.reference()], d, 0.5).map_err(js_err)?)
            }
            None => None,
        };
        Ok(render_slice(
            &self.case.frames[t],
            &self.case.masks[t],
            warped.as_ref(),
            z,
        ))
    }

    /// Registers frame `t` to the reference with `iters` iterations per level.
    pub fn register(&mut self, t: usize, iters: usize) -> Result<RegOutcome, JsError> {
        self.check(t, 0)?;
        let m = self.case.reference();
        if t == m {
            return Err(JsError::new("the reference frame maps to itself"));
        }
        let cfg = RegConfig {
            iters_per_level: iters,
            ..RegConfig::default()
        };
        let res =
            register_pair(&self.case.frames[t], &self.case.frames[m], &cfg).map_err(js_err)?;
        let ref_mask = &self.case.masks[m];
        let warped = warp_mask(ref_mask, &res.dvf, 0.5).map_err(js_err)?;
        let gt = self
            .case
            .gt_dvf(t)
            .ok_or_else(|| JsError::new("no analytic field for this frame"))?;
        let out = RegOutcome {
            frame: t,
            dice_before: dice(ref_mask, &self.case.masks[t]).map_err(js_err)?,
            dice_after: dice(&warped, &self.case.masks[t]).map_err(js_err)?,
            mean_epe_mm: endpoint_error(&res.dvf, gt, Some(ref_mask))
                .map_err(js_err)?
                .0,
            final_loss: res.loss_trace.last().map_or(f64::NAN, |l| l.total),
            iterations: res.loss_trace.len(),
        };
        self.fields[t] = Some(res.dvf);
        Ok(out)
    }

    /// Displacement magnitude of the registered field on slice `z`, scaled
    /// so that `max_mm` is white. Fails until frame `t` is registered.
    pub fn displacement_rgba(&self, t: usize, z: usize, max_mm: f64) -> Result<Vec<u8>, JsError> {
        self.check(t, z)?;
        let d = self.fields[t]
            .as_ref()
            .ok_or_else(|| JsError::new("register this frame first"))?;
        Ok(render_magnitude(d, z, max_mm))
    }

    /// Marching-cubes surfaces of the reference wall and of its propagation
    /// to frame `t` (registered field if any, analytic otherwise).
    pub fn surface(&self, t: usize, smooth: bool) -> Result<SurfaceStats, JsError> {
        self.check(t, 0)?;
        let m = self.case.reference();
        let mc = |k: &Mask| {
            if smooth {
                marching_cubes_smoothed(k)
            } else {
                marching_cubes(k)
            }
        };
        let reference = mc(&self.case.masks[m]);
        let warped = match (&self.fields[t], self.case.gt_dvf(t)) {
            _ if t == m => self.case.masks[m].clone(),
            (Some(d), _) | (None, Some(d)) => {
                warp_mask(&self.case.masks[m], d, 0.5).map_err(js_err)?
            }
            (None, None) => return Err(JsError::new("no field for this frame")),
        };
        let w = mc(&warped);
        Ok(SurfaceStats {
            triangles: reference.triangles.len(),
            area_mm2: reference.area(),
            warped_triangles: w.triangles.len(),
            warped_area_mm2: w.area(),
        })
    }
}

impl Demo {
    fn check(&self, t: usize, z: usize) -> Result<(), JsError> {
        if t >= self.frames() || z >= self.depth() {
            return Err(JsError::new(&format!("frame {t} / slice {z} out of range")));
        }
        Ok(())
    }
}

/// Inside the mask with at least one in-plane neighbour outside.
fn on_outline(mask: &Mask, i: usize, j: usize, k: usize) -> bool {
    let [nx, ny, _] = mask.grid.dims;
    if !mask.at(i, j, k) {
        return false;
    }
    let out = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(a), Some(b)) if a < nx && b < ny => !mask.at(a, b, k),
        _ => true,
    };
    out(i.checked_sub(1), Some(j))
        || out(Some(i + 1), Some(j))
        || out(Some(i), j.checked_sub(1))
        || out(Some(i), Some(j + 1))
}

/// Grey slice normalised to the volume's range; outlines drawn on top.
pub fn render_slice(vol: &Volume, mask: &Mask, warped: Option<&Mask>, z: usize) -> Vec<u8> {
    let [nx, ny, _] = vol.grid.dims;
    let (lo, hi) = vol
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut px = Vec::with_capacity(nx * ny * 4);
    for j in 0..ny {
        for i in 0..nx {
            let g = (255.0 * (vol.at(i, j, z) - lo) / span)
                .round()
                .clamp(0.0, 255.0) as u8;
            let rgb = if warped.is_some_and(|w| on_outline(w, i, j, z)) {
                [40, 220, 90]
            } else if on_outline(mask, i, j, z) {
                [230, 50, 50]
            } else {
                [g, g, g]
            };
            px.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
        }
    }
    px
}

/// Displacement magnitude on slice `z`, black at 0 and white at `max_mm`.
pub fn render_magnitude(dvf: &DisplacementField, z: usize, max_mm: f64) -> Vec<u8> {
    let g = &dvf.grid;
    let [nx, ny, _] = g.dims;
    let scale = if max_mm > 0.0 { 255.0 / max_mm } else { 0.0 };
    let mut px = Vec::with_capacity(nx * ny * 4);
    for j in 0..ny {
        for i in 0..nx {
            let [x, y, w] = dvf.vectors[g.index(i, j, z)];
            let v = ((x * x + y * y + w * w).sqrt() * scale)
                .round()
                .clamp(0.0, 255.0) as u8;
            px.extend_from_slice(&[v, v, v, 255]);
        }
    }
    px
}
