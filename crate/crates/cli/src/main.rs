use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod run;

use config::RunConfig;
use run::RunDir;

#[derive(Parser)]
#[command(name = "memo", version, about = "Streaming audio-visual target speaker extraction with memory banks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory for every artifact of the run.
    #[arg(short, long, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate dataset manifests (and optionally test audio).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
        /// Also write WAV and cue files for the test split.
        #[arg(long)]
        audio: bool,
    },
    /// Pretrain the speaker encoder and run PAR training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the settings × scenarios × modes grid.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured sweep axes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segmental evaluation on speaker-switch streams.
    SwitchEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(memo::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "configuration error: {m}"),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<memo::Error> for CliError {
    fn from(e: memo::Error) -> Self {
        match e {
            memo::Error::InvalidArgument(m) => Self::Config(m),
            e => Self::Core(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Core(memo::Error::Divergence { .. }) => 3,
            Self::Core(_) => 1,
        }
    }
}

fn setup(common: &Common, name: &str) -> Result<(RunConfig, RunDir), CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    let mut run = RunDir::open(&common.run_dir, name)?;
    run.write(&format!("config.{name}.toml"), "config", &cfg.to_toml())?;
    Ok((cfg, run))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut run = match cli.command {
        Command::Simulate { common, force, audio } => {
            let (cfg, mut run) = setup(&common, "simulate")?;
            run::simulate(&cfg, &mut run, force, audio)?;
            run
        }
        Command::Train { common, resume } => {
            let (cfg, mut run) = setup(&common, "train")?;
            let r = run::cmd_train(&cfg, &mut run, resume);
            run.finish()?;
            r?;
            run
        }
        Command::Eval { common, checkpoint } => {
            let (cfg, mut run) = setup(&common, "eval")?;
            let model = run::checkpoint(&run, checkpoint.as_deref())?;
            run::cmd_eval(&cfg, &mut run, &model)?;
            run
        }
        Command::Sweep { common, checkpoint } => {
            let (cfg, mut run) = setup(&common, "sweep")?;
            let only_beta = cfg.sweep.axes.iter().all(|a| a == "beta");
            let model = if only_beta { None } else { Some(run::checkpoint(&run, checkpoint.as_deref())?) };
            run::cmd_sweep(&cfg, &mut run, model.as_ref())?;
            run
        }
        Command::SwitchEval { common, checkpoint } => {
            let (cfg, mut run) = setup(&common, "switch-eval")?;
            let model = run::checkpoint(&run, checkpoint.as_deref())?;
            run::cmd_switch_eval(&cfg, &mut run, &model)?;
            run
        }
    };
    run.finish()?;
    run.record("artifacts.json", "index");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
