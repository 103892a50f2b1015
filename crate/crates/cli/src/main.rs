mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qgs_core::pipeline::{ModulationMode, PipelineKind};
use qgs_core::scene_io::synthetic::TargetKind;

/// Quantum-modulated Gaussian splatting: dataset generation, training,
/// rendering and verification.
#[derive(Parser, Debug)]
#[command(name = "qgs", version, about, after_help = "Exit status: 0 success, 1 usage or input error, 2 numerical failure.")]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Seed; overrides the seed in any configuration file.
    #[arg(long, global = true, env = "QGS_SEED")]
    seed: Option<u64>,

    /// Log verbosity for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (dataset.cfg, ground-truth scene, target views).
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Render a checkpoint from the dataset's cameras.
    Render(RenderArgs),
    /// Print mean metrics of a checkpoint over the dataset views as CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Equirectangular map of one Gaussian's modulated color over all view directions.
    Dirmap(DirmapArgs),
    /// Train every modulation variant under one budget and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Root under which the per-run directory is created.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunConfigArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    pipeline: Option<PipelineKind>,
    #[arg(long)]
    modulation: Option<ModulationMode>,
    #[arg(long)]
    iters: Option<u64>,
    /// Train plain SH Gaussians without quantum modulation.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Dataset configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one dataset key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    kind: Option<TargetKind>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `gen` (or its dataset.cfg).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunConfigArgs,
    /// Continue from a checkpoint; its configuration is used.
    #[arg(long, conflicts_with_all = ["config", "set", "pipeline", "modulation", "baseline"])]
    resume: Option<PathBuf>,
    /// Test hook: report a non-finite loss at this step.
    #[arg(long, hide = true)]
    inject_nonfinite_at: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Render only this view (default: all).
    #[arg(long)]
    view: Option<usize>,
    /// Image format.
    #[arg(long, default_value = "png", value_parser = ["png", "ppm"])]
    format: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    run: RunConfigArgs,
    /// Scene to check (at most 4 Gaussians); generated when absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Gaussians in the generated scene.
    #[arg(long, default_value_t = 2)]
    gaussians: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    /// Check at the identity initialization instead of perturbed parameters.
    #[arg(long)]
    identity: bool,
    /// Entries compared per parameter group.
    #[arg(long, default_value_t = 16)]
    entries: usize,
    #[arg(long, hide = true)]
    corrupt_group: Option<String>,
}

#[derive(Args, Debug)]
struct DirmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Gaussian index.
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    run: RunConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let numerical = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<qgs_core::Error>(),
                Some(qgs_core::Error::NonFiniteLoss(_) | qgs_core::Error::Numerical { .. })
            )
        });
        if numerical {
            Failure::Numerical(e)
        } else {
            Failure::Usage(e)
        }
    }
}

impl From<qgs_core::Error> for Failure {
    fn from(e: qgs_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            log::error!("thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    log::debug!("worker threads: {}", rayon::current_num_threads());
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(&cli, a),
        Command::Train(a) => commands::train(&cli, a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(&cli, a),
        Command::Dirmap(a) => commands::dirmap(&cli, a),
        Command::Ablate(a) => commands::ablate(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(e)) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
