//! `quetzal`: train, sample, score and evaluate autoregressive 3D molecule
//! models from the command line.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit codes.
const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "quetzal", version, about = "Autoregressive 3D molecule generation")]
struct Cli {
    /// Worker threads for data-parallel work (default: all cores; ignored
    /// in builds without the `parallel` feature).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on an `.xyz` corpus.
    Train(commands::TrainArgs),
    /// Generate molecules from scratch.
    Sample(commands::SampleArgs),
    /// Per-molecule negative log-likelihood in nats.
    Nll(commands::NllArgs),
    /// Strip hydrogens from each molecule and regenerate them.
    DecorateH(commands::DecorateArgs),
    /// Complete a fixed scaffold prefix.
    Scaffold(commands::ScaffoldArgs),
    /// Stability, validity and uniqueness of `.xyz` files.
    Eval(commands::EvalArgs),
    /// How a corpus packs into fixed-capacity rows.
    PackStats(commands::PackStatsArgs),
    /// Print the sampler's noise-level grid.
    ScheduleDump(commands::ScheduleArgs),
    /// Write a toy corpus of rigid template molecules.
    MakeToy(commands::MakeToyArgs),
}

/// Generation and scoring flags shared by several subcommands.
#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: std::path::PathBuf,
    /// Diffusion steps per atom (likelihood steps for `nll`).
    #[arg(long, default_value_t = 60)]
    n_diff: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the EMA weights (default).
    #[arg(long, overrides_with = "no_ema")]
    ema: bool,
    /// Use the live weights instead of the EMA weights.
    #[arg(long, overrides_with = "ema")]
    no_ema: bool,
}

impl ModelFlags {
    fn use_ema(&self) -> bool {
        !self.no_ema
    }
}

fn run(cli: Cli) -> failure::Result {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(failure::usage("--threads must be positive"));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| failure::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Nll(a) => commands::nll(a),
        Command::DecorateH(a) => commands::decorate(a),
        Command::Scaffold(a) => commands::scaffold(a),
        Command::Eval(a) => commands::eval(a),
        Command::PackStats(a) => commands::pack_stats(a),
        Command::ScheduleDump(a) => commands::schedule_dump(a),
        Command::MakeToy(a) => commands::make_toy(a),
    }
}

/// Command failures tagged with their exit code.
mod failure {
    use quetzal::Error;

    #[derive(Debug)]
    pub struct Failure {
        pub code: u8,
        pub message: String,
    }

    pub type Result<T = ()> = std::result::Result<T, Failure>;

    pub fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: super::USAGE,
            message: message.into(),
        }
    }

    impl From<Error> for Failure {
        fn from(e: Error) -> Self {
            let code = if e.is_numerical() {
                super::NUMERICAL
            } else if e.is_data_error() {
                super::DATA
            } else {
                super::USAGE
            };
            Failure {
                code,
                message: e.to_string(),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
