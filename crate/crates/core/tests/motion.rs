use std::sync::OnceLock;

use lamotion::autodiff::{gradient_check, GradCheckOptions, Tensor};
use lamotion::field::{smoothness_loss, warp_volume, DisplacementField, Grid, Volume};
use lamotion::motion::*;
use lamotion::phantom::{endpoint_error, generate_case, PhantomCase, PhantomConfig};
use lamotion::registration::{similarity_loss, Similarity};
use lamotion::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn phantom16(seed: u64) -> PhantomCase {
    generate_case(&PhantomConfig {
        dims: [16, 16, 16],
        frames: 8,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn dataset(case: &PhantomCase) -> MotionDataset {
    MotionDataset::from_cycle(&case.frames, &case.gt_dvfs, 0, case.slice_index, 8).unwrap()
}

/// Trained once on the seed-0 phantom and shared by the prediction tests.
fn trained() -> &'static (CvaeModel, Vec<EpochLoss>) {
    static MODEL: OnceLock<(CvaeModel, Vec<EpochLoss>)> = OnceLock::new();
    MODEL
        .get_or_init(|| train_cvae(&dataset(&phantom16(0)), &TrainConfig::default(), None).unwrap())
}

/// A periodic toy cycle of `frames` smooth volumes on an `n`³ grid with
/// small sinusoidal fields.
fn toy_cycle(n: usize, frames: usize) -> (Vec<Volume>, Vec<DisplacementField>) {
    let grid = Grid::cube(n, 1.0).unwrap();
    let field = |t: usize| {
        let a = 0.3 * (std::f64::consts::TAU * t as f64 / frames as f64).sin();
        DisplacementField::from_fn(grid, 0, t, move |p| {
            [a * (p[1] * 0.7).cos(), 0.5 * a, -a * (p[0] * 0.5).sin()]
        })
    };
    let base = Volume::from_fn(grid, |p| {
        (p[0] * 0.9).sin() + (p[1] * 0.6 + 0.2).cos() * (p[2] * 0.8).sin()
    });
    let dvfs: Vec<_> = (1..frames).map(field).collect();
    let mut vols = vec![base.clone()];
    vols.extend(dvfs.iter().map(|d| warp_volume(&base, d).unwrap()));
    (vols, dvfs)
}

fn toy_model(
    n: usize,
    n_steps: usize,
    latent: usize,
    mode: EncoderMode,
    mae: Option<MaeModel>,
    gain: f64,
) -> CvaeModel {
    let grid = Grid::cube(n, 1.0).unwrap();
    let mae_len = mae.as_ref().map_or(0, MaeModel::feature_len);
    let arch = CvaeArch::new(grid, n_steps, latent, mode, 4, 0, n / 2, mae_len).unwrap();
    let mut m = CvaeModel::new(arch, mae, 3).unwrap();
    m.params
        .insert("dec.gain".into(), Tensor::new(vec![1], vec![gain]).unwrap());
    m
}

fn toy_data(n: usize, n_steps: usize) -> MotionDataset {
    let (vols, dvfs) = toy_cycle(n, 4);
    MotionDataset::from_cycle(&vols, &dvfs, 0, n / 2, n_steps).unwrap()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// latent algebra

#[test]
fn reparameterize_examples() {
    assert_eq!(
        reparameterize(&[1.0, 2.0], &[0.5, 2.0], &[2.0, -1.0]).unwrap(),
        vec![2.0, 0.0]
    );
    assert_eq!(reparameterize(&[0.3], &[1.0], &[0.0]).unwrap(), vec![0.3]);
    assert!(reparameterize(&[0.0; 2], &[1.0; 3], &[0.0; 2]).is_err());
}

#[test]
fn sampled_codes_have_the_posterior_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mu, sigma) = (1.5, 0.7);
    let n = 100_000;
    let draws: Vec<f64> = (0..n)
        .map(|_| sample_latent(&[mu], &[sigma], &mut rng).unwrap()[0])
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = sigma / (n as f64).sqrt();
    assert!((mean - mu).abs() < 4.0 * se, "mean {mean}");
    assert!(rel(var, sigma * sigma) < 0.05, "variance {var}");
}

#[test]
fn kl_examples() {
    assert_eq!(kl_gaussian(&[0.0], &[1.0]).unwrap(), 0.0);
    assert_eq!(kl_gaussian(&[0.0; 5], &[1.0; 5]).unwrap(), 0.0);
    assert!((kl_gaussian(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    assert!((kl_gaussian(&[0.0], &[2.0]).unwrap() - 0.806_852_819_440_054_7).abs() < 1e-12);
    assert!(kl_gaussian(&[0.0], &[0.0]).is_err());
    assert!(kl_gaussian(&[0.0], &[-1.0]).is_err());
    assert!(kl_gaussian(&[0.0, 1.0], &[1.0]).is_err());
}

#[test]
fn kl_matches_the_closed_form_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let d = rng.random_range(1..6);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..4.0)).collect();
        let expect: f64 = mu
            .iter()
            .zip(&sigma)
            .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
            .sum();
        assert!((kl_gaussian(&mu, &sigma).unwrap() - expect).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn kl_is_nonnegative(pairs in prop::collection::vec((-5.0f64..5.0, 1e-3f64..10.0), 1..8)) {
        let (mu, sigma): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_gaussian(&mu, &sigma).unwrap() >= 0.0);
    }

    #[test]
    fn zero_noise_returns_the_mean(mu in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let sigma = vec![0.5; mu.len()];
        prop_assert_eq!(reparameterize(&mu, &sigma, &vec![0.0; mu.len()]).unwrap(), mu);
    }
}

#[test]
fn encoder_modes_parse_and_label() {
    for m in EncoderMode::ALL {
        assert_eq!(m.to_string().parse::<EncoderMode>().unwrap(), m);
    }
    assert_eq!(
        "Motion+MAE".parse::<EncoderMode>().unwrap(),
        EncoderMode::MotionMae
    );
    assert!("vae".parse::<EncoderMode>().is_err());
    assert_eq!(EncoderMode::Mae.label(), "MAE encoder");
}

// slice sequences and datasets

#[test]
fn slice_history_is_newest_first_and_cyclic() {
    let (vols, dvfs) = toy_cycle(8, 4);
    let s = SliceSequence::from_cycle(&vols, 3, 1, 3).unwrap();
    assert_eq!(s.last_frame, 1);
    assert_eq!(s.slices[0], vols[1].axial_slice(3));
    assert_eq!(s.slices[1], vols[0].axial_slice(3));
    assert_eq!(s.slices[2], vols[3].axial_slice(3));
    assert!(SliceSequence::from_cycle(&vols, 8, 1, 3).is_err());
    assert!(SliceSequence::from_cycle(&vols, 3, 4, 3).is_err());
    assert!(SliceSequence::new(vec![vec![0.0; 5]], [2, 2], 0).is_err());

    let data = MotionDataset::from_cycle(&vols, &dvfs, 0, 3, 2).unwrap();
    assert_eq!(data.samples.len(), 3);
    for s in &data.samples {
        assert_eq!(s.dvf.to_frame, s.target_frame);
        assert_eq!(s.iseq.last_frame, (s.target_frame + 3) % 4);
    }
    let err = MotionDataset::from_cycle(&vols, &dvfs[..2], 0, 3, 2).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}

// encoder / decoder

#[test]
fn encode_is_deterministic_with_sigma_above_the_floor() {
    let data = toy_data(8, 2);
    let m = toy_model(8, 2, 4, EncoderMode::Motion, None, 0.5);
    let s = &data.samples[1];
    let a = encode(&s.dvf, &s.iseq, &s.vref, &m).unwrap();
    let b = encode(&s.dvf, &s.iseq, &s.vref, &m).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.mu.len(), 4);
    assert_eq!(a.z, a.mu);
    assert!(a.sigma.iter().all(|s| s.is_finite() && *s >= SIGMA_FLOOR));
    assert!(a.mu.iter().all(|v| v.is_finite()));
}

#[test]
fn decode_is_deterministic_and_starts_at_zero() {
    let data = toy_data(8, 2);
    let s = &data.samples[0];
    let m = toy_model(8, 2, 4, EncoderMode::Motion, None, 0.5);
    let cond = m.condition_features(&s.iseq, &s.vref).unwrap();
    let z = [0.3, -1.0, 0.2, 0.9];
    let a = decode(&z, &cond, &m, 2).unwrap();
    assert_eq!(a, decode(&z, &cond, &m, 2).unwrap());
    assert_eq!((a.from_frame, a.to_frame), (0, 2));
    assert!(a.vectors.iter().flatten().all(|v| v.is_finite()));
    assert!(a.mean_magnitude() > 0.0);

    let untrained = toy_model(8, 2, 4, EncoderMode::Motion, None, 0.0);
    assert_eq!(
        decode(&z, &cond, &untrained, 2).unwrap().mean_magnitude(),
        0.0
    );
    assert!(matches!(
        decode(&z[..3], &cond, &m, 2),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn latent_size_is_bounded_by_the_grid() {
    let grid = Grid::cube(8, 1.0).unwrap();
    assert!(CvaeArch::new(grid, 2, 8, EncoderMode::Motion, 4, 0, 4, 0).is_ok());
    assert!(CvaeArch::new(grid, 2, 9, EncoderMode::Motion, 4, 0, 4, 0).is_err());
    assert!(matches!(
        CvaeArch::new(grid, 2, 4, EncoderMode::Mae, 4, 0, 4, 0),
        Err(Error::MissingModel(_))
    ));
}

// loss

#[test]
fn loss_terms_are_nonnegative_and_decompose() {
    let data = toy_data(8, 2);
    let m = toy_model(8, 2, 4, EncoderMode::Motion, None, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps: Vec<_> = data.samples.iter().map(|_| normals(&mut rng, 4)).collect();
    let cfg = TrainConfig {
        lambda_smooth: 0.3,
        beta_kl: 0.7,
        latent_dim: 4,
        ..Default::default()
    };
    for s in &data.samples {
        let l = cvae_loss(&m, std::slice::from_ref(s), &cfg, &eps[..1]).unwrap();
        assert!(l.kl >= 0.0 && l.smooth >= 0.0 && l.sim >= 0.0);
    }
    let l = cvae_loss(&m, &data.samples, &cfg, &eps).unwrap();
    assert!(rel(l.rec, l.sim + 0.3 * l.smooth) < 1e-12);
    assert!(rel(l.total, l.rec + 0.7 * l.kl) < 1e-12);

    let zero_beta = TrainConfig {
        beta_kl: 0.0,
        ..cfg
    };
    let l0 = cvae_loss(&m, &data.samples, &zero_beta, &eps).unwrap();
    assert_eq!(l0.total, l0.rec);
    assert!(cvae_loss(&m, &data.samples, &cfg, &eps[..1]).is_err());
}

#[test]
fn loss_matches_a_scripted_evaluation_on_a_tiny_grid() {
    // 4³ lattice, one latent dimension, coarse decoder lattice of one voxel
    let data = toy_data(4, 2);
    let m = toy_model(4, 2, 1, EncoderMode::Motion, None, 0.8);
    let cfg = TrainConfig {
        lambda_smooth: 0.25,
        beta_kl: 0.5,
        latent_dim: 1,
        ..Default::default()
    };
    let s = &data.samples[1];
    let eps = vec![vec![0.6]];
    let got = cvae_loss(&m, std::slice::from_ref(s), &cfg, &eps).unwrap();

    let code = encode(&s.dvf, &s.iseq, &s.vref, &m).unwrap();
    let z = reparameterize(&code.mu, &code.sigma, &eps[0]).unwrap();
    let cond = m.condition_features(&s.iseq, &s.vref).unwrap();
    let u = decode(&z, &cond, &m, s.target_frame).unwrap();
    assert!(u.mean_magnitude() > 0.0);
    let sim = similarity_loss(&warp_volume(&s.vref, &u).unwrap(), &s.vt, Similarity::Mse).unwrap();
    let smooth = smoothness_loss(&u);
    let kl = kl_gaussian(&code.mu, &code.sigma).unwrap();
    let expect = sim + 0.25 * smooth + 0.5 * kl;
    assert!(rel(got.sim, sim) < 1e-12, "{} vs {sim}", got.sim);
    assert!(rel(got.smooth, smooth) < 1e-12);
    assert!(rel(got.kl, kl) < 1e-12);
    assert!(rel(got.total, expect) < 1e-12, "{} vs {expect}", got.total);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let data = toy_data(8, 2);
    let m = toy_model(8, 2, 4, EncoderMode::Motion, None, 0.5);
    let cfg = TrainConfig {
        latent_dim: 4,
        ..Default::default()
    };
    let batch = &data.samples[..1];
    let eps = vec![vec![0.1, -0.4, 0.8, 0.3]];
    let report = gradient_check(
        |t, p| {
            let v = m.loss_graph(t, p, batch, &eps, &cfg, 1.0)?;
            Ok(v.kl)
        },
        &m.params,
        GradCheckOptions {
            max_coords: Some(6),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.per_param.keys().any(|k| k.starts_with("post.")));
    assert!(report.passed, "{:?}", report.per_param);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let data = toy_data(6, 2);
    let m = toy_model(6, 2, 3, EncoderMode::Motion, None, 0.7);
    let cfg = TrainConfig {
        latent_dim: 3,
        lambda_smooth: 0.1,
        beta_kl: 0.5,
        ..Default::default()
    };
    let batch = &data.samples[1..2];
    let eps = vec![vec![0.5, -0.2, 1.1]];
    // `total`, not `objective`: the predictive head regresses a detached
    // posterior mean, which finite differences cannot see as detached
    let report = gradient_check(
        |t, p| Ok(m.loss_graph(t, p, batch, &eps, &cfg, cfg.beta_kl)?.total),
        &m.params,
        GradCheckOptions {
            tolerance: 1e-4,
            max_coords: Some(5),
            ..Default::default()
        },
    )
    .unwrap();
    for name in [
        "dec.gain",
        "dec.fc2.w",
        "head.mu.b",
        "head.sigma.w",
        "cond.s1.w",
        "post.c1.w",
    ] {
        assert!(report.per_param.contains_key(name), "{name} missing");
    }
    assert!(report.passed, "{:?}", report.per_param);
}

// training

#[test]
fn training_reduces_the_loss_on_a_phantom() {
    let (_, hist) = trained();
    assert_eq!(hist.len(), 30);
    assert!(hist.iter().all(|h| h.kl >= 0.0 && h.smooth >= 0.0));
    let drop = 1.0 - hist[29].total / hist[0].total;
    assert!(drop >= 0.2, "loss fell by {:.1}%", 100.0 * drop);
}

#[test]
fn training_history_is_reproducible() {
    let data = dataset(&phantom16(0));
    let cfg = TrainConfig {
        epochs: 4,
        ..Default::default()
    };
    let (a, ha) = train_cvae(&data, &cfg, None).unwrap();
    let (b, hb) = train_cvae(&data, &cfg, None).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert!((0..4).all(|e| ha[e].beta == cfg.beta_at(e)));
}

#[test]
fn kl_weight_pulls_the_posterior_towards_the_prior() {
    let data = toy_data(8, 2);
    let run = |beta_kl| {
        let cfg = TrainConfig {
            epochs: 15,
            beta_kl,
            latent_dim: 4,
            lr: 5e-3,
            ..Default::default()
        };
        train_cvae(&data, &cfg, None).unwrap().1.last().unwrap().kl
    };
    let (k0, k1) = (run(0.0), run(1.0));
    assert!(k1 < k0, "kl with β=1 {k1}, with β=0 {k0}");
}

#[test]
fn training_rejects_bad_configs() {
    let data = toy_data(8, 2);
    let bad = TrainConfig {
        lr: 0.0,
        ..Default::default()
    };
    assert!(train_cvae(&data, &bad, None).is_err());
    let mae_mode = TrainConfig {
        encoder_mode: EncoderMode::Mae,
        latent_dim: 4,
        ..Default::default()
    };
    assert!(matches!(
        train_cvae(&data, &mae_mode, None),
        Err(Error::MissingModel(_))
    ));
}

#[test]
fn warm_up_ramps_the_kl_weight() {
    let cfg = TrainConfig {
        epochs: 10,
        beta_kl: 0.4,
        warmup_frac: 0.2,
        ..Default::default()
    };
    let betas: Vec<f64> = (0..4).map(|e| cfg.beta_at(e)).collect();
    assert_eq!(betas, vec![0.2, 0.4, 0.4, 0.4]);
    assert_eq!(
        TrainConfig {
            warmup_frac: 0.0,
            ..cfg
        }
        .beta_at(0),
        0.4
    );
}

// masked autoencoder

fn small_mae(epochs: usize, mask_ratio: f64) -> MaeConfig {
    MaeConfig {
        patch: 4,
        epochs,
        mask_ratio,
        ..Default::default()
    }
}

#[test]
fn patchify_orders_tokens_by_time_then_row() {
    let slices = vec![
        (0..16).map(f64::from).collect(),
        (100..116).map(f64::from).collect(),
    ];
    let seq = SliceSequence::new(slices, [4, 4], 0).unwrap();
    let t = patchify(&seq, 2).unwrap();
    assert_eq!(t.len(), 32);
    assert_eq!(&t[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&t[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&t[8..12], &[8.0, 9.0, 12.0, 13.0]);
    assert_eq!(&t[16..20], &[100.0, 101.0, 104.0, 105.0]);
    assert!(patchify(&seq, 3).is_err());
}

#[test]
fn mae_rejects_a_full_mask() {
    let data = toy_data(8, 2);
    assert!(pretrain_mae(&data.sequences(), &small_mae(2, 1.0)).is_err());
    assert!(pretrain_mae(&data.sequences(), &small_mae(2, 1.5)).is_err());
}

#[test]
fn mae_without_masked_patches_is_a_no_op() {
    let data = toy_data(8, 2);
    let (m, hist) = pretrain_mae(&data.sequences(), &small_mae(5, 0.0)).unwrap();
    assert!(hist.is_empty());
    assert!(!m.trained);
    let fresh = MaeModel::new(small_mae(5, 0.0), 2, [8, 8]).unwrap();
    assert_eq!(m.params, fresh.params);
}

#[test]
fn mae_loss_is_zero_on_blank_slices() {
    let seqs: Vec<_> = (0..3)
        .map(|t| SliceSequence::new(vec![vec![0.0; 64]; 2], [8, 8], t).unwrap())
        .collect();
    let (_, hist) = pretrain_mae(&seqs, &small_mae(3, 0.5)).unwrap();
    assert_eq!(hist, vec![0.0; 3]);
}

#[test]
fn mae_pretraining_halves_the_masked_loss_on_phantom_slices() {
    let data = dataset(&phantom16(0));
    let (m, hist) = pretrain_mae(&data.sequences(), &MaeConfig::default()).unwrap();
    assert!(m.trained);
    assert_eq!(hist.len(), 50);
    assert!(hist[49] <= 0.5 * hist[0], "{} → {}", hist[0], hist[49]);
    let (_, again) = pretrain_mae(&data.sequences(), &MaeConfig::default()).unwrap();
    assert_eq!(hist, again);
}

#[test]
fn conditioning_features_follow_the_mode() {
    let data = toy_data(8, 2);
    let (mae, _) = pretrain_mae(&data.sequences(), &small_mae(3, 0.5)).unwrap();
    let both = toy_model(8, 2, 4, EncoderMode::MotionMae, Some(mae.clone()), 0.5);
    let s = &data.samples[0];
    let other_ref = &data.samples[1].vt;

    let f_motion =
        condition_features(&s.iseq, &s.vref, EncoderMode::Motion, Some(&both), None).unwrap();
    let f_mae = condition_features(&s.iseq, &s.vref, EncoderMode::Mae, None, Some(&mae)).unwrap();
    let f_both =
        condition_features(&s.iseq, &s.vref, EncoderMode::MotionMae, Some(&both), None).unwrap();
    assert_eq!(f_both.len(), f_motion.len() + f_mae.len());
    assert_eq!(f_both, [f_motion.clone(), f_mae.clone()].concat());
    assert_eq!(f_both, both.condition_features(&s.iseq, &s.vref).unwrap());
    assert_eq!(
        f_mae,
        condition_features(&s.iseq, other_ref, EncoderMode::Mae, None, Some(&mae)).unwrap()
    );
    assert_ne!(
        f_motion,
        condition_features(&s.iseq, other_ref, EncoderMode::Motion, Some(&both), None).unwrap()
    );
    assert_eq!(f_mae, mae.features(&s.iseq).unwrap());

    assert!(matches!(
        condition_features(&s.iseq, &s.vref, EncoderMode::Mae, None, None),
        Err(Error::MissingModel(_))
    ));
    let motion_only = toy_model(8, 2, 4, EncoderMode::Mae, Some(mae), 0.5);
    assert!(matches!(
        condition_features(
            &s.iseq,
            &s.vref,
            EncoderMode::Motion,
            Some(&motion_only),
            None
        ),
        Err(Error::MissingModel(_))
    ));
}

#[test]
fn mae_modes_train_with_a_pretrained_encoder() {
    let data = toy_data(8, 2);
    let (mae, _) = pretrain_mae(&data.sequences(), &small_mae(3, 0.5)).unwrap();
    for mode in [EncoderMode::Mae, EncoderMode::MotionMae] {
        let cfg = TrainConfig {
            epochs: 2,
            latent_dim: 4,
            encoder_mode: mode,
            ..Default::default()
        };
        let (m, hist) = train_cvae(&data, &cfg, Some(mae.clone())).unwrap();
        assert_eq!(m.arch.mode, mode);
        assert!(hist.iter().all(|h| h.total.is_finite()));
        assert_eq!(
            m.mae.as_ref().unwrap().params,
            mae.params,
            "the encoder stays frozen"
        );
    }
    let untrained = MaeModel::new(small_mae(3, 0.5), 2, [8, 8]).unwrap();
    let cfg = TrainConfig {
        encoder_mode: EncoderMode::Mae,
        latent_dim: 4,
        ..Default::default()
    };
    assert!(matches!(
        train_cvae(&data, &cfg, Some(untrained)),
        Err(Error::Untrained(_))
    ));
}

// prediction

#[test]
fn prediction_stamps_frames_and_is_deterministic() {
    let (model, _) = trained();
    let case = phantom16(0);
    let iseq = SliceSequence::from_cycle(&case.frames, case.slice_index, 6, 8).unwrap();
    let a = predict_ahead(model, &iseq, &case.frames[0], 3).unwrap();
    let b = predict_ahead(model, &iseq, &case.frames[0], 3).unwrap();
    assert_eq!(a, b);
    let stamps: Vec<_> = a.iter().map(|d| (d.from_frame, d.to_frame)).collect();
    assert_eq!(stamps, vec![(0, 7), (0, 0), (0, 1)]);
    assert!(predict_ahead(model, &iseq, &case.frames[0], 0).is_err());
}

#[test]
fn prediction_beats_zero_motion_on_a_held_out_phantom() {
    let (model, _) = trained();
    let case = phantom16(7);
    let (mut err, mut mag) = (0.0, 0.0);
    for t in 1..8 {
        let iseq = SliceSequence::from_cycle(&case.frames, case.slice_index, t - 1, 8).unwrap();
        let p = predict_ahead(model, &iseq, &case.frames[0], 1).unwrap();
        let gt = case.gt_dvf(t).unwrap();
        err += endpoint_error(&p[0], gt, None).unwrap().0;
        mag += gt.mean_magnitude();
    }
    assert!(
        err < mag,
        "endpoint error {:.4} vs magnitude {:.4}",
        err / 7.0,
        mag / 7.0
    );
}

#[test]
fn prediction_needs_a_trained_model() {
    let data = toy_data(8, 2);
    let m = toy_model(8, 2, 4, EncoderMode::Motion, None, 0.5);
    let s = &data.samples[0];
    assert!(matches!(
        predict_ahead(&m, &s.iseq, &s.vref, 1),
        Err(Error::Untrained(_))
    ));
}
