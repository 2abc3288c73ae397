use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use visa::commands::{self, Predictor};
use visa::config::RunConfig;
use visa::{dataset, CliError, Result};
use visa_core::eval::SplitKind;
use visa_core::OpKind;

#[derive(Parser)]
#[command(name = "visa", version, about = "Semantic-aggregation skill scoring on video episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `section.key = value` run configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset and write a checkpoint plus `<checkpoint>.log`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to `data.dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cross-validate, retraining each fold from the checkpoint's parameters.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// loso, louo or kfold:<k>; defaults to `data.scheme`.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, hide = true, default_value = "model")]
        predictor: String,
    },
    /// Write assignment-map overlays of one episode as PPM images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter group and op.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Double the derivative of the named op.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_seed(common.seed))
}

fn data_dir(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| CliError::Precondition("no dataset: pass --data or set data.dir".into()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let n = commands::synth(&cfg, &out)?;
            println!("wrote {n} episodes to {}", out.display());
        }
        Command::Train { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let data = data_dir(&cfg, data)?;
            commands::train_command(&cfg, &data, &checkpoint, |line| println!("{line}"))?;
            println!("checkpoint {}", checkpoint.display());
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            scheme,
            predictor,
        } => {
            let cfg = load_config(&common)?;
            let data = data_dir(&cfg, data)?;
            let scheme = match scheme {
                Some(s) => SplitKind::parse(&s)?,
                None => cfg.data.scheme,
            };
            let predictor = Predictor::from_name(&predictor)
                .ok_or_else(|| CliError::Precondition(format!("unknown predictor {predictor:?}")))?;
            let (_, store) = commands::load_model(&cfg, &checkpoint)?;
            let episodes = dataset::read_dataset(&data)?;
            let report = commands::evaluate(&cfg, &episodes, &store, scheme, predictor, |fold, l| {
                eprintln!("fold={fold} {}", l.line())
            })?;
            print!("{}", report.render());
        }
        Command::Render {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (model, store) = commands::load_model(&cfg, &checkpoint)?;
            let written = commands::render_command(&model, &store, &data, &out)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Gradcheck { common, fault } => {
            let cfg = load_config(&common)?;
            let fault = match fault {
                Some(name) => Some(
                    OpKind::from_name(&name)
                        .ok_or_else(|| CliError::Precondition(format!("unknown op {name:?}")))?,
                ),
                None => None,
            };
            let summary = commands::gradcheck(cfg.data.seed, fault)?;
            print!("{}", summary.text);
            if !summary.passed {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
