//! `hat`: train, evaluate, inspect and sweep re-identification models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hat::model::FeatureMode;

#[derive(Debug, Parser)]
#[command(name = "hat", version, about = "Hierarchical aggregation re-identification models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the query/gallery split.
    Eval(EvalArgs),
    /// Dump channel-averaged aggregation maps for one image.
    Inspect(InspectArgs),
    /// Train and evaluate one arm per value of a config key.
    Sweep(SweepArgs),
}

/// Configuration shared by every command.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set dsa.depths=3,3,6,0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; takes precedence over the config and HAT_OUTPUT_ROOT.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Retrieval features: concat, backbone-only or hat-only.
    #[arg(long, value_parser = parse_features)]
    features: Option<FeatureMode>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image file, `synth://num_ids/per_id/seed`, or `zeros`.
    #[arg(long)]
    input: String,
    /// Sample index when the input is synthetic.
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dotted config key to vary, e.g. `loss.lambda`.
    #[arg(long)]
    axis: String,
    /// Values for the axis; lists use commas (`--values 3,3,6,0 0,0,12,0`).
    #[arg(long, num_args = 0.., value_name = "VALUE")]
    values: Vec<String>,
    /// Arms to run at the same time.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn parse_features(s: &str) -> Result<FeatureMode, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.cfg.into(), a.resume.as_deref()),
        Command::Eval(a) => commands::eval(&a.cfg.into(), &a.checkpoint, a.features),
        Command::Inspect(a) => commands::inspect(&a.cfg.into(), &a.checkpoint, &a.input, a.index),
        Command::Sweep(a) => commands::sweep(&a.cfg.into(), &a.axis, &a.values, a.jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<ConfigArgs> for commands::ConfigSource {
    fn from(a: ConfigArgs) -> Self {
        Self {
            path: a.config,
            overrides: a.overrides,
            output: a.output,
        }
    }
}

