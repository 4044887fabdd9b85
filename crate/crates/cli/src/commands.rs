use std::path::{Path, PathBuf};

use lamotion::autodiff::{gradient_suite, SuiteEntry};
use lamotion::eval::{
    evaluate_cycle, marching_cubes, marching_cubes_smoothed, method_table_csv, warp_mesh,
};
use lamotion::io::{
    history_csv, load_cvae, load_mae, mae_history_csv, read_case, read_dvf, read_dvf_dir,
    read_mask, read_obj, read_volume, save_cvae, save_mae, write_case, write_dvf, write_dvf_dir,
    write_obj, write_text,
};
use lamotion::motion::{
    compare_methods, cvae_gradient_check, predict_ahead, pretrain_mae, train_cvae, CompareConfig,
    MaeConfig, MaeModel, MotionDataset, SliceSequence, TrainConfig,
};
use lamotion::phantom::{generate_case, PhantomConfig};
use lamotion::registration::{register_pair, track_cycle, RegConfig, Similarity};
use lamotion::{Error, Result};
use log::info;

use crate::args::*;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(PhantomCmd::Gen(a)) => phantom_gen(a),
        Command::Register(RegisterCmd::Pair(a)) => register_pair_cmd(a),
        Command::Register(RegisterCmd::Cycle(a)) => register_cycle(a),
        Command::Train(TrainCmd::Cvae(a)) => train(a),
        Command::Mae(MaeCmd::Pretrain(a)) => mae_pretrain(a),
        Command::Predict(a) => predict(a),
        Command::Eval(EvalCmd::Cycle(a)) => eval_cycle(a),
        Command::Eval(EvalCmd::Compare(a)) => eval_compare(a),
        Command::Mesh(MeshCmd::Extract(a)) => mesh_extract(a),
        Command::Mesh(MeshCmd::Warp(a)) => mesh_warp(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn reg_config(f: &RegFlags) -> RegConfig {
    RegConfig {
        similarity: match f.sim {
            SimArg::Mse => Similarity::Mse,
            SimArg::Lncc => Similarity::Lncc { window: f.window },
        },
        lambda_smooth: f.lambda,
        cutoff: f.cutoff,
        levels: f.levels,
        iters_per_level: f.iters,
        lr: f.lr,
        ..RegConfig::default()
    }
}

fn train_config(f: &ModelFlags) -> TrainConfig {
    TrainConfig {
        epochs: f.epochs,
        lr: f.lr,
        beta_kl: f.beta_kl,
        lambda_smooth: f.lambda,
        latent_dim: f.latent_dim,
        encoder_mode: f.encoder,
        seed: f.seed,
        ..TrainConfig::default()
    }
}

fn phantom_gen(a: PhantomGenArgs) -> Result<()> {
    let cfg = PhantomConfig {
        dims: a.dims,
        spacing_mm: a.spacing,
        frames: a.frames,
        amplitude: a.amplitude,
        twist: a.twist,
        noise: a.noise,
        seed: a.seed,
        ..PhantomConfig::default()
    };
    let case = generate_case(&cfg)?;
    let subject = a.subject.unwrap_or_else(|| format!("phantom-{}", a.seed));
    write_case(&a.out, &case, &subject)?;
    info!("wrote {} frames to {}", case.frames.len(), a.out.display());
    Ok(())
}

fn register_pair_cmd(a: RegisterPairArgs) -> Result<()> {
    let mut fixed = read_volume(&a.fixed)?;
    let mut moving = read_volume(&a.moving)?;
    // Unstamped inputs map frame 0 onto frame 1.
    fixed.frame = fixed.frame.or(Some(1));
    moving.frame = moving.frame.or(Some(0));
    let res = register_pair(&fixed, &moving, &reg_config(&a.reg))?;
    if let Some(last) = res.loss_trace.last() {
        info!(
            "final loss {} ({} iterations)",
            last.total,
            res.loss_trace.len()
        );
    }
    write_dvf(&a.out, &res.dvf)
}

fn register_cycle(a: RegisterCycleArgs) -> Result<()> {
    let case = read_case(&a.case)?;
    let m = a.reference.unwrap_or(case.reference());
    let dvfs = track_cycle(&case.frames, m, &reg_config(&a.reg))?;
    write_dvf_dir(&a.out, &dvfs)?;
    info!("wrote {} fields to {}", dvfs.len(), a.out.display());
    Ok(())
}

/// One dataset over every case; fields come from `dvf_dirs` when given,
/// otherwise from the cases' ground truth.
fn dataset(cases: &[PathBuf], dvf_dirs: &[PathBuf], n_steps: usize) -> Result<MotionDataset> {
    if !dvf_dirs.is_empty() && dvf_dirs.len() != cases.len() {
        return Err(Error::InvalidArgument(format!(
            "{} field directories for {} cases",
            dvf_dirs.len(),
            cases.len()
        )));
    }
    let mut all: Option<MotionDataset> = None;
    for (i, dir) in cases.iter().enumerate() {
        let case = read_case(dir)?;
        let dvfs = match dvf_dirs.get(i) {
            Some(d) => read_dvf_dir(d, case.frames.len(), case.reference(), &case.grid())?,
            None if case.gt_dvfs.is_empty() => {
                return Err(Error::InvalidArgument(format!(
                    "{} has no ground-truth fields; pass --dvfs",
                    dir.display()
                )))
            }
            None => case.gt_dvfs.clone(),
        };
        let ds = MotionDataset::from_cycle(
            &case.frames,
            &dvfs,
            case.reference(),
            case.slice_index(),
            n_steps,
        )?;
        match &mut all {
            Some(acc) => acc.extend(ds)?,
            None => all = Some(ds),
        }
    }
    all.ok_or_else(|| Error::InvalidArgument("no training cases".into()))
}

fn train(a: TrainCvaeArgs) -> Result<()> {
    let data = dataset(&a.case, &a.dvfs, a.model.steps)?;
    let cfg = train_config(&a.model);
    let mae: Option<MaeModel> = match (&a.mae, cfg.encoder_mode.uses_mae()) {
        (Some(p), _) => Some(load_mae(p)?),
        (None, true) => {
            info!("pretraining the masked autoencoder on the training slices");
            let mcfg = MaeConfig {
                seed: cfg.seed,
                ..MaeConfig::default()
            };
            Some(pretrain_mae(&data.sequences(), &mcfg)?.0)
        }
        (None, false) => None,
    };
    let (model, history) = train_cvae(&data, &cfg, mae)?;
    save_cvae(&a.out, &model)?;
    write_text(&a.out.join("history.csv"), &history_csv(&history))?;
    if let Some(h) = history.last() {
        info!("final epoch total {}", h.total);
    }
    Ok(())
}

fn mae_pretrain(a: MaePretrainArgs) -> Result<()> {
    let mut seqs = Vec::new();
    for dir in &a.case {
        let case = read_case(dir)?;
        let t = case.frames.len();
        for last in 0..t {
            seqs.push(SliceSequence::from_cycle(
                &case.frames,
                case.slice_index(),
                last,
                a.steps,
            )?);
        }
    }
    let cfg = MaeConfig {
        patch: a.patch,
        mask_ratio: a.mask_ratio,
        epochs: a.epochs,
        seed: a.seed,
        ..MaeConfig::default()
    };
    let (model, history) = pretrain_mae(&seqs, &cfg)?;
    save_mae(&a.out, &model)?;
    write_text(&a.out.join("history.csv"), &mae_history_csv(&history))
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_cvae(&a.ckpt)?;
    let case = read_case(&a.case)?;
    let t = case.frames.len();
    if a.horizon >= t {
        return Err(Error::InvalidArgument(format!(
            "horizon {} would revisit a frame of the {t}-frame cycle",
            a.horizon
        )));
    }
    let last = a.last_frame.unwrap_or(case.reference());
    let iseq =
        SliceSequence::from_cycle(&case.frames, case.slice_index(), last, model.arch.n_steps)?;
    let dvfs = predict_ahead(&model, &iseq, &case.frames[case.reference()], a.horizon)?;
    write_dvf_dir(&a.out, &dvfs)
}

/// `report.csv` → `report_summary.csv` in the same directory.
fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}_summary.csv"))
}

fn eval_cycle(a: EvalCycleArgs) -> Result<()> {
    let case = read_case(&a.case)?;
    let m = case.reference();
    let dvfs = read_dvf_dir(&a.dvfs, case.frames.len(), m, &case.grid())?;
    let report = evaluate_cycle(&case.masks, &case.masks[m], &dvfs, a.percentile)?;
    write_text(&a.out, &report.frames_csv())?;
    write_text(&summary_path(&a.out), &report.summary_csv())
}

fn eval_compare(a: EvalCompareArgs) -> Result<()> {
    let data = dataset(&a.train_case, &[], a.model.steps)?;
    let eval = read_case(&a.eval_case)?;
    let cfg = CompareConfig {
        train: train_config(&a.model),
        mae: MaeConfig {
            epochs: a.mae_epochs,
            seed: a.model.seed,
            ..MaeConfig::default()
        },
        registration: RegConfig {
            iters_per_level: a.reg_iters,
            ..RegConfig::default()
        },
        percentile: a.percentile,
    };
    let rows = compare_methods(&data, &eval.frames, &eval.masks, &cfg)?;
    let table: Vec<_> = rows
        .into_iter()
        .map(|r| (r.label, r.report.summary))
        .collect();
    write_text(&a.out, &method_table_csv(&table))
}

fn mesh_extract(a: MeshExtractArgs) -> Result<()> {
    let mask = read_mask(&a.mask)?;
    let mesh = if a.smooth {
        marching_cubes_smoothed(&mask)
    } else {
        marching_cubes(&mask)
    };
    info!(
        "{} vertices, {} triangles, area {} mm²",
        mesh.vertices.len(),
        mesh.triangles.len(),
        mesh.area()
    );
    write_obj(&a.out, &mesh)
}

fn mesh_warp(a: MeshWarpArgs) -> Result<()> {
    let mesh = read_obj(&a.mesh)?;
    let dvf = read_dvf(&a.dvf)?;
    write_obj(&a.out, &warp_mesh(&mesh, &dvf))
}

fn print_entry(e: &SuiteEntry) {
    let r = &e.report;
    println!(
        "{} {:<32} tol {:e}  max rel err {:.3e}  coords {}",
        if r.passed { "PASS" } else { "FAIL" },
        e.name,
        e.tolerance,
        r.max_rel_error,
        r.checked
    );
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut entries = gradient_suite(a.seed)?;
    entries.push(SuiteEntry {
        name: "cvae total loss",
        tolerance: lamotion::autodiff::WARP_TOLERANCE,
        report: cvae_gradient_check(a.seed)?,
    });
    entries.iter().for_each(print_entry);
    let failed: Vec<_> = entries
        .iter()
        .filter(|e| !e.report.passed)
        .map(|e| e.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
