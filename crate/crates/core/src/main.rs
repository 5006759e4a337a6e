//! `dlalign` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dlalign::cli::{exit_code, Method, Pipeline, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    GenMotions,
    Pretrain,
    Collect,
    TrainDelta,
    TrainDeltaDyn,
    Sysid,
    Finetune,
    NoiseFinetune,
    Eval,
    EvalOpen,
    EvalClosed,
    Ablate,
    FullPipeline,
    /// Print the resolved configuration and exit.
    ShowConfig,
}

/// Delta-action dynamics alignment pipeline.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `io.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `align.method`.
    #[arg(long)]
    method: Option<String>,
    /// Continue in an output directory written with a different config.
    #[arg(long)]
    resume: bool,
}

fn run(args: Args) -> dlalign::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.io.output_dir = out;
    }
    if let Some(m) = &args.method {
        cfg.align.method = m.parse::<Method>()?;
    }
    cfg.validate()?;
    if args.command == Command::ShowConfig {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let mut p = Pipeline::open(cfg, args.resume)?;
    match args.command {
        Command::GenMotions => p.gen_motions(),
        Command::Pretrain => p.pretrain(),
        Command::Collect => p.collect(),
        Command::TrainDelta => p.train_delta(),
        Command::TrainDeltaDyn => p.train_delta_dyn(),
        Command::Sysid => p.sysid(),
        Command::Finetune => p.finetune(),
        Command::NoiseFinetune => p.noise_finetune(),
        Command::Eval => p.eval(),
        Command::EvalOpen => p.eval_open(),
        Command::EvalClosed => p.eval_closed(),
        Command::Ablate => p.ablate(),
        Command::FullPipeline => p.full(),
        Command::ShowConfig => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { dlalign::cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
