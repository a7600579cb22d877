use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latent_scope_cli::{commands, init_threads, CliError, CliResult, Context, RunConfig, Status};

#[derive(Parser)]
#[command(name = "latent-scope", version, about = "Unsupervised tool-presence detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Config override on a dotted path, e.g. `vae.epochs=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic frames (or index a frame directory) and fix the split.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of synthetic frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the VAE on the training split.
    TrainVae(Common),
    /// Encode training and test frames with the trained VAE.
    Encode(Common),
    /// Cosine-query evaluation of the test encodings.
    EvalDirect(Common),
    /// Fit the two-component mixture to the training encodings by MCMC.
    FitMixture(Common),
    /// Score test frames by cluster membership.
    EvalMixture(Common),
    /// Train the LSTM future-prediction network.
    TrainFp(Common),
    /// Evaluate sequence encodings of the test frames.
    EvalFp(Common),
    /// Print the resolved configuration as JSON.
    Config(Common),
    /// Print the AP table recorded in the manifest.
    Report {
        /// Output directory holding manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage in order.
    Run {
        #[command(flatten)]
        common: Common,
        /// Required; kept for symmetry with per-stage commands.
        #[arg(long)]
        all: bool,
    },
}

fn config(common: &Common, extra: Vec<String>) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.out.is_some() {
        config.out.clone_from(&common.out);
    }
    let mut sets = extra;
    sets.extend(common.sets.iter().cloned());
    config.with_overrides(&sets)
}

fn context(common: Common, extra: Vec<String>) -> CliResult<Context> {
    Context::new(config(&common, extra)?, common.out, common.force)
}

fn dispatch(command: Command) -> CliResult<Status> {
    let stage = |c: Common, f: fn(&Context) -> CliResult<Status>| f(&context(c, Vec::new())?);
    match command {
        Command::Synth { common, frames } => {
            let extra = frames.map(|n| vec![format!("dataset.frames={n}")]).unwrap_or_default();
            commands::synth(&context(common, extra)?)
        }
        Command::TrainVae(c) => stage(c, commands::train_vae),
        Command::Encode(c) => stage(c, commands::encode),
        Command::EvalDirect(c) => stage(c, commands::eval_direct),
        Command::FitMixture(c) => stage(c, commands::fit_mixture),
        Command::EvalMixture(c) => stage(c, commands::eval_mixture),
        Command::TrainFp(c) => stage(c, commands::train_fp),
        Command::EvalFp(c) => stage(c, commands::eval_fp),
        Command::Config(c) => {
            let resolved = config(&c, Vec::new())?.resolve()?;
            let text = serde_json::to_string_pretty(&resolved).map_err(|e| CliError::Other(e.to_string()))?;
            println!("{text}");
            Ok(Status::Ok)
        }
        Command::Report { out } => {
            print!("{}", commands::report(&out)?);
            Ok(Status::Ok)
        }
        Command::Run { common, all } => {
            if !all {
                return Err(CliError::Config("`run` needs --all".into()));
            }
            commands::run_all(&context(common, Vec::new())?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| dispatch(cli.command));
    match result {
        Ok(status) => ExitCode::from(status.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
