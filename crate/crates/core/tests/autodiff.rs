use std::sync::Arc;

use lamotion::autodiff::{
    forward, gradient_check, Adam, GradCheckOptions, ParamSet, Tape, Tensor, Var,
};
use lamotion::field::{Grid, SynthBasis};
use lamotion::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn opts() -> GradCheckOptions {
    GradCheckOptions::default()
}

/// Independent central-difference oracle over every coordinate of one parameter.
fn numeric_grad<F: Fn(&ParamSet) -> f64>(f: F, p: &ParamSet, name: &str, h: f64) -> Vec<f64> {
    let mut work = p.clone();
    (0..p[name].len())
        .map(|i| {
            let orig = work[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let fp = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let fm = f(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn dense_identity_passes_input_through() {
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let p = params(vec![("w", eye), ("b", Tensor::zeros(&[3]))]);
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
    let (out, _, _) = forward(std::slice::from_ref(&x), &p, |t, v, p| {
        let w = t.param(p, "w")?;
        let b = t.param(p, "b")?;
        Ok(vec![t.dense(v[0], w, b)?])
    })
    .unwrap();
    assert_eq!(out[0], x);
}

#[test]
fn unit_conv_doubles_constant_input() {
    let p = params(vec![
        ("w", Tensor::filled(&[1, 1, 1, 1, 1], 2.0)),
        ("b", Tensor::zeros(&[1])),
    ]);
    let x = Tensor::filled(&[1, 1, 3, 4, 5], 1.0);
    let (out, _, _) = forward(&[x], &p, |t, v, p| {
        let w = t.param(p, "w")?;
        let b = t.param(p, "b")?;
        Ok(vec![t.conv3d(v[0], w, b, 1, 0)?])
    })
    .unwrap();
    assert_eq!(out[0].shape(), &[1, 1, 3, 4, 5]);
    assert!(out[0].data().iter().all(|v| *v == 2.0));
}

#[test]
fn relu_clips_negatives() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 3.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 3.0]);
}

#[test]
fn mse_of_identical_inputs_has_zero_gradient() {
    let mut t = Tape::new();
    let x = t.input(Tensor::vector(vec![1.0, 2.0, -3.0]).with_grad());
    let l = t.mse(x, x).unwrap();
    let g = t.backward(l, None).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn scalar_product_derivative() {
    let p = params(vec![("w", Tensor::scalar(0.7))]);
    let mut t = Tape::new();
    let w = t.param(&p, "w").unwrap();
    let x = t.constant(Tensor::scalar(3.0));
    let wx = t.mul(w, x).unwrap();
    let l = t.mean(wx);
    let g = t.backward(l, None).unwrap().params(&p);
    assert_eq!(g["w"].item(), 3.0);
}

#[test]
fn second_backward_is_rejected() {
    let mut t = Tape::new();
    let x = t.input(Tensor::scalar(2.0).with_grad());
    let y = t.scale(x, 3.0);
    t.backward(y, None).unwrap();
    assert!(matches!(t.backward(y, None), Err(Error::TapeConsumed)));
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[3, 2]));
    let err = t.add(a, b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    let w = t.constant(Tensor::zeros(&[4, 5]));
    let bias = t.constant(Tensor::zeros(&[4]));
    let err = t.dense(a, w, bias).unwrap_err().to_string();
    assert!(err.contains("dense") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn adam_first_step_closed_form() {
    let mut p = params(vec![("a", Tensor::scalar(1.0))]);
    let g = params(vec![("a", Tensor::scalar(1.0))]);
    let mut opt = Adam::new(0.1);
    opt.step(&mut p, &g).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction.
    let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!((p["a"].item() - expected).abs() < 1e-15);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = params(vec![("a", Tensor::vector(vec![0.3, -2.0]))]);
    let before = p.clone();
    let g = params(vec![("a", Tensor::zeros(&[2]))]);
    let mut opt = Adam::default();
    opt.step(&mut p, &g).unwrap();
    assert_eq!(p, before);
    assert_eq!(opt.steps(), 1);
}

#[test]
fn adam_identical_params_move_identically() {
    let mut p = params(vec![("a", Tensor::scalar(0.5)), ("b", Tensor::scalar(0.5))]);
    let g = params(vec![
        ("a", Tensor::scalar(-0.2)),
        ("b", Tensor::scalar(-0.2)),
    ]);
    let mut opt = Adam::new(0.01);
    for _ in 0..5 {
        opt.step(&mut p, &g).unwrap();
    }
    assert_eq!(p["a"], p["b"]);
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut p = params(vec![("a", Tensor::scalar(0.5))]);
    let before = p.clone();
    let g = params(vec![("a", Tensor::scalar(f64::NAN))]);
    assert!(matches!(
        Adam::new(0.1).step(&mut p, &g),
        Err(Error::NonFinite(_))
    ));
    assert_eq!(p, before);
}

#[test]
fn linear_graph_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = params(vec![
        ("w", rand_tensor(&mut rng, &[4, 6], 1.0)),
        ("b", rand_tensor(&mut rng, &[4], 1.0)),
    ]);
    let x = rand_tensor(&mut rng, &[3, 6], 1.0);
    let r = gradient_check(
        |t, p| {
            let xv = t.constant(x.clone());
            let w = t.param(p, "w")?;
            let b = t.param(p, "b")?;
            let y = t.dense(xv, w, b)?;
            Ok(t.sum(y))
        },
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");
}

#[test]
fn relu_kink_coordinates_are_skipped() {
    let p = params(vec![("x", Tensor::vector(vec![0.0, 1e-7, -2.0, 1.5]))]);
    let r = gradient_check(
        |t, p| {
            let x = t.param(p, "x")?;
            let y = t.relu(x);
            Ok(t.sum(y))
        },
        &p,
        opts(),
    )
    .unwrap();
    assert_eq!(r.skipped, 2);
    assert_eq!(r.checked, 2);
    assert!(r.passed);
}

#[test]
fn elementwise_primitives_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4], 1.0);
    let b = Tensor::new(
        vec![2, 3, 4],
        (0..24).map(|_| rng.random_range(0.5..2.0)).collect(),
    )
    .unwrap();
    let p = params(vec![("a", a), ("b", b)]);
    let r = gradient_check(
        |t, p| {
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
            let sc = t.add_scalar(sc, 0.3);
            let r = t.relu(sc);
            let sq = t.mul(r, r)?;
            Ok(t.mean(sq))
        },
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn conv_relu_dense_stack_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(vec![
        ("c1.w", rand_tensor(&mut rng, &[3, 2, 3, 3, 3], 0.4)),
        ("c1.b", rand_tensor(&mut rng, &[3], 0.1)),
        ("c2.w", rand_tensor(&mut rng, &[2, 3, 3, 3, 3], 0.4)),
        ("c2.b", rand_tensor(&mut rng, &[2], 0.1)),
        ("d.w", rand_tensor(&mut rng, &[5, 16], 0.3)),
        ("d.b", rand_tensor(&mut rng, &[5], 0.1)),
    ]);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4], 1.0);
    let target = rand_tensor(&mut rng, &[1, 5], 1.0);
    let r = gradient_check(
        |t, p| {
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
        },
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > 100);
}

#[test]
fn conv2d_pool_upsample_concat_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = params(vec![
        ("x", rand_tensor(&mut rng, &[2, 3, 4, 6], 1.0)),
        ("w", rand_tensor(&mut rng, &[2, 3, 3, 3], 0.5)),
        ("b", rand_tensor(&mut rng, &[2], 0.1)),
        ("v", rand_tensor(&mut rng, &[1, 2, 2, 4, 4], 1.0)),
    ]);
    let r = gradient_check(
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
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn token_mixing_primitives_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = params(vec![
        ("x", rand_tensor(&mut rng, &[4, 3], 1.0)),
        ("g", Tensor::scalar(0.6)),
        ("pos", rand_tensor(&mut rng, &[4, 3], 0.5)),
    ]);
    let mask = vec![
        true, false, true, true, false, false, true, false, true, true, false, true,
    ];
    let r = gradient_check(
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
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn masked_mse_with_empty_mask_is_zero() {
    let mut t = Tape::new();
    let a = t.input(Tensor::vector(vec![1.0, 2.0]).with_grad());
    let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let l = t.masked_mse(a, b, vec![false, false]).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    let g = t.backward(l, None).unwrap();
    assert!(g.get(a).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
}

#[test]
fn kl_gradient_passes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = params(vec![
        ("mu", rand_tensor(&mut rng, &[1, 6], 1.0)),
        (
            "s",
            Tensor::new(
                vec![1, 6],
                (0..6).map(|_| rng.random_range(0.3..2.0)).collect(),
            )
            .unwrap(),
        ),
    ]);
    let r = gradient_check(
        |t, p| {
            let mu = t.param(p, "mu")?;
            let s = t.param(p, "s")?;
            t.kl_gaussian(mu, s)
        },
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn kl_rejects_nonpositive_sigma() {
    let mut t = Tape::new();
    let mu = t.constant(Tensor::vector(vec![0.0]));
    let s = t.constant(Tensor::vector(vec![0.0]));
    assert!(matches!(
        t.kl_gaussian(mu, s),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn field_primitives_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = Grid::new([5, 6, 4], [1.2, 1.0, 1.5]).unwrap();
    let n = grid.len();
    let vol = Tensor::new(
        vec![4, 6, 5],
        (0..n).map(|i| ((i * 37 % 11) as f64 * 0.3).sin()).collect(),
    )
    .unwrap();
    let cutoff = [1, 2, 1];
    let basis = Arc::new(SynthBasis::native(&grid, cutoff).unwrap());
    let p = params(vec![
        ("c", rand_tensor(&mut rng, &[basis.coeff_len()], 0.15)),
        ("vol", vol),
    ]);
    let fixed = rand_tensor(&mut rng, &[4, 6, 5], 1.0);
    let r = gradient_check(
        |t, p| {
            let c = t.param(p, "c")?;
            let u = t.synth(c, basis.clone())?;
            let v = t.param(p, "vol")?;
            let w = t.warp(v, u, &grid)?;
            let f = t.constant(fixed.clone());
            let sim = t.mse(w, f)?;
            let sm = t.smoothness(u, &grid)?;
            let sm = t.scale(sm, 0.1);
            t.add(sim, sm)
        },
        &p,
        GradCheckOptions {
            tolerance: 1e-4,
            ..opts()
        },
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
    assert!(r.checked > 0);
}

#[test]
fn box_mean_passes_and_preserves_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = [5, 4, 6];
    let p = params(vec![("x", rand_tensor(&mut rng, &[6, 4, 5], 1.0))]);
    let w = rand_tensor(&mut rng, &[6, 4, 5], 1.0);
    let r = gradient_check(
        |t, p| {
            let x = t.param(p, "x")?;
            let m = t.box_mean(x, dims, 2)?;
            let wv = t.constant(w.clone());
            let y = t.mul(m, wv)?;
            Ok(t.sum(y))
        },
        &p,
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9, "{r:?}");

    let mut t = Tape::new();
    let c = t.constant(Tensor::filled(&[6, 4, 5], 2.5));
    let m = t.box_mean(c, dims, 1).unwrap();
    assert!(t.value(m).data().iter().all(|v| (v - 2.5).abs() < 1e-14));
}

#[test]
fn gradient_check_agrees_with_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = params(vec![
        ("w", rand_tensor(&mut rng, &[3, 4], 1.0)),
        ("b", rand_tensor(&mut rng, &[3], 1.0)),
    ]);
    let x = rand_tensor(&mut rng, &[2, 4], 1.0);
    let graph = |t: &mut Tape, p: &ParamSet| -> lamotion::Result<Var> {
        let xv = t.constant(x.clone());
        let (w, b) = (t.param(p, "w")?, t.param(p, "b")?);
        let y = t.dense(xv, w, b)?;
        let y = t.softplus(y);
        let y2 = t.mul(y, y)?;
        Ok(t.mean(y2))
    };
    let mut t = Tape::new();
    let l = graph(&mut t, &p).unwrap();
    let g = t.backward(l, None).unwrap().params(&p);
    let eval = |q: &ParamSet| {
        let mut t = Tape::new();
        let l = graph(&mut t, q).unwrap();
        t.scalar(l)
    };
    for name in ["w", "b"] {
        let num = numeric_grad(eval, &p, name, 1e-6);
        for (a, n) in g[name].data().iter().zip(&num) {
            assert!((a - n).abs() < 1e-8, "{name}: {a} vs {n}");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = params(vec![
            ("w", rand_tensor(&mut rng, &[2, 1, 3, 3, 3], 1.0)),
            ("b", rand_tensor(&mut rng, &[2], 1.0)),
        ]);
        let x = rand_tensor(&mut rng, &[1, 1, 4, 4, 4], 1.0);
        let (out, vars, mut tape) = forward(&[x], &p, |t, v, p| {
            let (w, b) = (t.param(p, "w")?, t.param(p, "b")?);
            let y = t.conv3d(v[0], w, b, 1, 1)?;
            let y = t.relu(y);
            Ok(vec![t.mean(y)])
        })
        .unwrap();
        let g = tape.backward(vars[0], None).unwrap().params(&p);
        (out, g)
    };
    assert_eq!(run(), run());
}
