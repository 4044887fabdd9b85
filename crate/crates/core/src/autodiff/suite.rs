//! Finite-difference checks of every primitive on small random inputs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
use super::tape::{Tape, Var};
use super::tensor::{ParamSet, Tensor};
use crate::error::Result;
use crate::field::{Grid, SynthBasis};

/// Tolerance for graphs without a warp.
pub const SMOOTH_TOLERANCE: f64 = 1e-5;
/// Tolerance for graphs through trilinear warping.
pub const WARP_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

fn set(entries: Vec<(&str, Tensor)>) -> ParamSet {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn run<F>(name: &'static str, tolerance: f64, params: &ParamSet, graph: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let opts = GradCheckOptions {
        tolerance,
        ..Default::default()
    };
    Ok(SuiteEntry {
        name,
        tolerance,
        report: gradient_check(graph, params, opts)?,
    })
}

/// Runs one graph per primitive family; inputs are at most 6 voxels per axis.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let p = set(vec![
        ("a", rand_tensor(r, &[2, 3, 4], -1.0, 1.0)),
        ("b", rand_tensor(r, &[2, 3, 4], 0.5, 2.0)),
    ]);
    out.push(run("elementwise", SMOOTH_TOLERANCE, &p, |t, p| {
        let a = t.param(p, "a")?;
        let b = t.param(p, "b")?;
        let s = t.add(a, b)?;
        let d = t.sub(s, a)?;
        let m = t.mul(a, d)?;
        let q = t.div(m, b)?;
        let sq = t.sqrt(b)?;
        let q = t.add(q, sq)?;
        let sp = t.softplus(q);
        let sc = t.scale(sp, 1.7);
        let sc = t.add_scalar(sc, -0.3);
        let r = t.relu(sc);
        let y = t.mul(r, r)?;
        Ok(t.mean(y))
    })?);

    let x = rand_tensor(r, &[1, 2, 4, 4, 4], -1.0, 1.0);
    let target = rand_tensor(r, &[1, 5], -1.0, 1.0);
    let p = set(vec![
        ("c1.w", rand_tensor(r, &[3, 2, 3, 3, 3], -0.4, 0.4)),
        ("c1.b", rand_tensor(r, &[3], -0.1, 0.1)),
        ("c2.w", rand_tensor(r, &[2, 3, 3, 3, 3], -0.4, 0.4)),
        ("c2.b", rand_tensor(r, &[2], -0.1, 0.1)),
        ("d.w", rand_tensor(r, &[5, 16], -0.3, 0.3)),
        ("d.b", rand_tensor(r, &[5], -0.1, 0.1)),
    ]);
    out.push(run("conv3d+dense+mse", SMOOTH_TOLERANCE, &p, |t, p| {
        let xv = t.constant(x.clone());
        let (w1, b1) = (t.param(p, "c1.w")?, t.param(p, "c1.b")?);
        let h = t.conv3d(xv, w1, b1, 1, 1)?;
        let h = t.relu(h);
        let (w2, b2) = (t.param(p, "c2.w")?, t.param(p, "c2.b")?);
        let h = t.conv3d(h, w2, b2, 2, 1)?;
        let h = t.reshape(h, &[1, 16])?;
        let (wd, bd) = (t.param(p, "d.w")?, t.param(p, "d.b")?);
        let y = t.dense(h, wd, bd)?;
        let tv = t.constant(target.clone());
        t.mse(y, tv)
    })?);

    let p = set(vec![
        ("x", rand_tensor(r, &[2, 3, 4, 6], -1.0, 1.0)),
        ("w", rand_tensor(r, &[2, 3, 3, 3], -0.5, 0.5)),
        ("b", rand_tensor(r, &[2], -0.1, 0.1)),
        ("v", rand_tensor(r, &[1, 2, 2, 4, 4], -1.0, 1.0)),
    ]);
    out.push(run(
        "conv2d+pool+upsample+concat",
        SMOOTH_TOLERANCE,
        &p,
        |t, p| {
            let x = t.param(p, "x")?;
            let (w, b) = (t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv2d(x, w, b, 1, 1)?;
            let y = t.avg_pool(y, 2, 2)?;
            let y = t.upsample(y, 2, 2)?;
            let c = t.concat(&[y, x], 1)?;
            let v = t.param(p, "v")?;
            let pv = t.avg_pool(v, 2, 3)?;
            let uv = t.upsample(pv, 2, 3)?;
            let m = t.mul(uv, v)?;
            let s1 = t.mean(m);
            let c2 = t.mul(c, c)?;
            let s2 = t.sum(c2);
            t.add(s1, s2)
        },
    )?);

    let mask: Vec<bool> = (0..12).map(|_| r.random_bool(0.5)).collect();
    let p = set(vec![
        ("x", rand_tensor(r, &[4, 3], -1.0, 1.0)),
        ("g", Tensor::scalar(0.6)),
        ("pos", rand_tensor(r, &[4, 3], -0.5, 0.5)),
    ]);
    out.push(run(
        "transpose+mean_rows+masked_mse",
        SMOOTH_TOLERANCE,
        &p,
        |t, p| {
            let x = t.param(p, "x")?;
            let pos = t.param(p, "pos")?;
            let h = t.add(x, pos)?;
            let tr = t.transpose(h)?;
            let tr = t.transpose(tr)?;
            let m = t.mean_rows(tr)?;
            let g = t.param(p, "g")?;
            let m = t.mul_scalar_var(m, g)?;
            let m = t.sum(m);
            let zero = t.constant(Tensor::zeros(&[4, 3]));
            let mm = t.masked_mse(tr, zero, mask.clone())?;
            t.add(m, mm)
        },
    )?);

    let p = set(vec![
        ("mu", rand_tensor(r, &[1, 6], -1.0, 1.0)),
        ("s", rand_tensor(r, &[1, 6], 0.3, 2.0)),
    ]);
    out.push(run("kl_gaussian", SMOOTH_TOLERANCE, &p, |t, p| {
        let mu = t.param(p, "mu")?;
        let s = t.param(p, "s")?;
        t.kl_gaussian(mu, s)
    })?);

    let dims = [5, 4, 6];
    let w = rand_tensor(r, &[6, 4, 5], -1.0, 1.0);
    let p = set(vec![("x", rand_tensor(r, &[6, 4, 5], -1.0, 1.0))]);
    out.push(run("box_mean", SMOOTH_TOLERANCE, &p, |t, p| {
        let x = t.param(p, "x")?;
        let m = t.box_mean(x, dims, 2)?;
        let wv = t.constant(w.clone());
        let y = t.mul(m, wv)?;
        Ok(t.sum(y))
    })?);

    let grid = Grid::new([5, 6, 4], [1.2, 1.0, 1.5])?;
    let basis = Arc::new(SynthBasis::native(&grid, [1, 2, 1])?);
    let fixed = rand_tensor(r, &[4, 6, 5], -1.0, 1.0);
    let vol = Tensor::new(
        vec![4, 6, 5],
        (0..grid.len())
            .map(|i| ((i * 37 % 11) as f64 * 0.3).sin())
            .collect(),
    )?;
    let p = set(vec![
        ("c", rand_tensor(r, &[basis.coeff_len()], -0.15, 0.15)),
        ("vol", vol),
    ]);
    out.push(run("synth+warp+smoothness", WARP_TOLERANCE, &p, |t, p| {
        let c = t.param(p, "c")?;
        let u = t.synth(c, basis.clone())?;
        let v = t.param(p, "vol")?;
        let w = t.warp(v, u, &grid)?;
        let f = t.constant(fixed.clone());
        let sim = t.mse(w, f)?;
        let sm = t.smoothness(u, &grid)?;
        let sm = t.scale(sm, 0.1);
        t.add(sim, sm)
    })?);

    Ok(out)
}
