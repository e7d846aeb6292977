use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowct::analysis::Method;
use flowct::ResidualMode;

mod commands;
mod config;

use config::{AblateAxis, FieldChoice, PhantomChoice, RunConfig};

#[derive(Parser)]
#[command(
    name = "flowct",
    version,
    about = "Flow-matching sparse-view CT reconstruction"
)]
struct Cli {
    /// TOML run manifest; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom image, or a directory of random phantoms.
    Phantom(PhantomArgs),
    /// Forward-project an image into a parallel-beam sinogram.
    Project(ProjectArgs),
    /// Train the velocity network on a directory of images.
    Train(TrainArgs),
    /// Reconstruct an image from a sinogram.
    Reconstruct(ReconstructArgs),
    /// Check the error order of velocity reuse on an analytic field.
    VerifyBounds(VerifyArgs),
    /// Sweep one reuse parameter and report image quality and NFE.
    Ablate(AblateArgs),
    /// Compare reconstruction methods on quality, data fit, NFE and time.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    #[arg(long, value_enum)]
    pub kind: Option<PhantomChoice>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_ellipses: Option<usize>,
    /// Write this many random phantoms (seeds seed, seed+1, ...) into the
    /// directory given by --out.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct GeometryArgs {
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub detectors: Option<usize>,
}

#[derive(Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of `.fct` training images.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Continue from the model at --out and its `.state` file.
    #[arg(long)]
    pub resume: bool,
    /// Loss log; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum ModeArg {
    Algorithm1,
    PreDcOnly,
}

impl From<ModeArg> for ResidualMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Algorithm1 => ResidualMode::Algorithm1,
            ModeArg::PreDcOnly => ResidualMode::PreDcOnly,
        }
    }
}

#[derive(Args, Clone)]
pub struct SamplerArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_reuse: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub reuse_start: Option<usize>,
    #[arg(long)]
    pub cg_iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub residual_mode: Option<ModeArg>,
}

/// Where the velocity comes from: a trained network or the analytic field
/// of a single known image.
#[derive(Args, Clone)]
pub struct FieldArgs {
    #[arg(long, conflicts_with = "target")]
    pub model: Option<PathBuf>,
    /// Image whose point-mass flow is used as the velocity field.
    #[arg(long)]
    pub target: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
pub enum MethodArg {
    Fbp,
    Fmct,
    Efmct,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Fbp => Method::Fbp,
            MethodArg::Fmct => Method::Fmct,
            MethodArg::Efmct => Method::Efmct,
        }
    }
}

#[derive(Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub sino: PathBuf,
    #[arg(long, value_enum, default_value = "efmct")]
    pub method: MethodArg,
    #[command(flatten)]
    pub field: FieldArgs,
    /// Image size; inferred from the model, target or detector count.
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step trace; defaults to `<out>.trace.csv`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    /// Ground truth for PSNR and SSIM.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub field: Option<FieldChoice>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Terminal error over whole trajectories instead of one step.
    #[arg(long)]
    pub global: bool,
    #[arg(long)]
    pub max_reuse: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Option<AblateAxis>,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[command(flatten)]
    pub field: FieldArgs,
    /// Ground-truth images; metrics are averaged over them.
    #[arg(long, value_delimiter = ',', required = true)]
    pub truth: Vec<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BenchmarkArgs {
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Option<Vec<MethodArg>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[command(flatten)]
    pub field: FieldArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub truth: Vec<PathBuf>,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration (exit 1).
    Usage(anyhow::Error),
    /// I/O or computation error, or a failed check (exit 2).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<flowct::Error> for Failure {
    fn from(e: flowct::Error) -> Self {
        // the message already carries the source; avoid printing it twice
        Failure::Runtime(anyhow::anyhow!("{e}"))
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("FLOWCT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "FLOWCT_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    match cli.command {
        Command::Phantom(a) => commands::phantom(cfg, a),
        Command::Project(a) => commands::project(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Reconstruct(a) => commands::reconstruct(cfg, a),
        Command::VerifyBounds(a) => commands::verify_bounds(cfg, a),
        Command::Ablate(a) => commands::ablate(cfg, a),
        Command::Benchmark(a) => commands::benchmark(cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
