use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lamotion::motion::EncoderMode;

#[derive(Debug, Parser)]
#[command(
    name = "lamotion",
    version,
    about = "Dense 4D displacement-field estimation and motion modelling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom cases
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Classical band-limited registration
    #[command(subcommand)]
    Register(RegisterCmd),
    /// Model training
    #[command(subcommand)]
    Train(TrainCmd),
    /// Masked-autoencoder pretraining
    #[command(subcommand)]
    Mae(MaeCmd),
    /// Forecast fields after a slice history with a trained model
    Predict(PredictArgs),
    /// Mask-propagation evaluation
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Surface meshes
    #[command(subcommand)]
    Mesh(MeshCmd),
    /// Finite-difference checks of every differentiable primitive and the CVAE loss
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCmd {
    /// Generate a phantom case directory
    Gen(PhantomGenArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Lattice size: N or X,Y,Z
    #[arg(long, default_value = "32", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 24)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.8)]
    pub spacing: f64,
    /// Peak radial displacement as a fraction of the distance to the centre
    #[arg(long, default_value_t = 0.12)]
    pub amplitude: f64,
    /// Peak twist in radians
    #[arg(long, default_value_t = 0.05)]
    pub twist: f64,
    /// Noise standard deviation as a fraction of the intensity range
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long)]
    pub subject: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SimArg {
    Mse,
    Lncc,
}

#[derive(Debug, Args)]
pub struct RegFlags {
    /// Smoothness weight
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Band-limit cutoff: K or KX,KY,KZ
    #[arg(long, default_value = "6", value_parser = parse_dims)]
    pub cutoff: [usize; 3],
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 150)]
    pub iters: usize,
    #[arg(long, value_enum, default_value_t = SimArg::Mse)]
    pub sim: SimArg,
    /// LNCC window side in voxels (odd)
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
}

#[derive(Debug, Subcommand)]
pub enum RegisterCmd {
    /// Register a moving volume onto a fixed one
    Pair(RegisterPairArgs),
    /// Register every frame of a case to its reference
    Cycle(RegisterCycleArgs),
}

#[derive(Debug, Args)]
pub struct RegisterPairArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub reg: RegFlags,
}

#[derive(Debug, Args)]
pub struct RegisterCycleArgs {
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Reference frame (defaults to the case's)
    #[arg(long = "ref")]
    pub reference: Option<usize>,
    #[command(flatten)]
    pub reg: RegFlags,
}

#[derive(Debug, Subcommand)]
pub enum TrainCmd {
    /// Train the conditional VAE motion model
    Cvae(TrainCvaeArgs),
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Conditioning source: motion, mae or motion+mae
    #[arg(long, value_parser = parse_mode, default_value = "motion")]
    pub encoder: EncoderMode,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub latent_dim: usize,
    /// KL weight after warm-up
    #[arg(long, default_value_t = 0.01)]
    pub beta_kl: f64,
    /// Smoothness weight
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Slices per conditioning history
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct TrainCvaeArgs {
    /// Training case directory (repeatable)
    #[arg(long, required = true)]
    pub case: Vec<PathBuf>,
    /// Checkpoint directory to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Registered fields to train on (one directory per case, in order);
    /// ground truth is used otherwise
    #[arg(long)]
    pub dvfs: Vec<PathBuf>,
    /// Pretrained encoder checkpoint for the MAE modes; pretrained on the
    /// training slices when absent
    #[arg(long)]
    pub mae: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum MaeCmd {
    /// Pretrain the masked autoencoder on a case's slice histories
    Pretrain(MaePretrainArgs),
}

#[derive(Debug, Args)]
pub struct MaePretrainArgs {
    #[arg(long, required = true)]
    pub case: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    /// Newest observed frame (defaults to the reference)
    #[arg(long)]
    pub last_frame: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Per-frame metrics of propagated masks and a mean ± std summary
    Cycle(EvalCycleArgs),
    /// Train every encoder mode and score them with the classical baseline
    Compare(EvalCompareArgs),
}

#[derive(Debug, Args)]
pub struct EvalCycleArgs {
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub dvfs: PathBuf,
    /// Per-frame CSV; the summary goes to `<stem>_summary.csv`
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
}

#[derive(Debug, Args)]
pub struct EvalCompareArgs {
    /// Training case directory (repeatable)
    #[arg(long, required = true)]
    pub train_case: Vec<PathBuf>,
    #[arg(long)]
    pub eval_case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long, default_value_t = 50)]
    pub mae_epochs: usize,
    #[arg(long, default_value_t = 95.0)]
    pub percentile: f64,
    /// Iterations per pyramid level of the baseline registration (other
    /// registration settings keep their defaults)
    #[arg(long, default_value_t = 150)]
    pub reg_iters: usize,
}

#[derive(Debug, Subcommand)]
pub enum MeshCmd {
    /// Marching-cubes surface of a mask
    Extract(MeshExtractArgs),
    /// Move mesh vertices by a displacement field
    Warp(MeshWarpArgs),
}

#[derive(Debug, Args)]
pub struct MeshExtractArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Extract from a smoothed indicator instead of the binary mask
    #[arg(long)]
    pub smooth: bool,
}

#[derive(Debug, Args)]
pub struct MeshWarpArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub dvf: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{p}` is not a positive integer"))
        })
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err("expected N or X,Y,Z".into()),
    }
}

fn parse_mode(s: &str) -> Result<EncoderMode, String> {
    s.parse().map_err(|e: lamotion::Error| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_accept_one_or_three_values() {
        assert_eq!(parse_dims("16").unwrap(), [16; 3]);
        assert_eq!(parse_dims("8,10,12").unwrap(), [8, 10, 12]);
        assert!(parse_dims("8,10").is_err());
        assert!(parse_dims("x").is_err());
    }

    #[test]
    fn command_tree_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
