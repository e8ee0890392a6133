use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lampo::harness::{self, ExperimentConfig};
use lampo::{LampoError, Result};

#[derive(Parser)]
#[command(name = "lampo", version, about = "Latent movement policy optimization on a planar reacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations.
    GenDemos(Common),
    /// Fit the mixture model to the demonstrations and write the initial policy.
    Imitate(Common),
    /// Run the improvement loop starting from the imitation policy.
    Improve(Common),
    /// Evaluate a policy on fresh contexts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model file to evaluate (default: improved model if present).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides the configured number of evaluation episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// All of the above in sequence.
    FullRun(Common),
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenDemos(c) | Command::Imitate(c) | Command::Improve(c) | Command::FullRun(c) => c,
        Command::Eval { common, .. } => common,
    };
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (mut cfg, out) = load_config(common)?;
    match &cli.command {
        Command::GenDemos(_) => {
            let path = harness::cmd_gen_demos(&cfg, &out)?;
            emit(&serde_json::json!({ "demos": path, "n_demos": cfg.n_demos }))
        }
        Command::Imitate(_) => emit(&harness::cmd_imitate(&cfg, &out)?),
        Command::Improve(_) => {
            let rows = harness::cmd_improve(&cfg, &out)?;
            let last = rows.last().ok_or_else(|| LampoError::Config("no iterations".into()))?;
            emit(last)
        }
        Command::Eval { model, episodes, .. } => {
            if let Some(n) = episodes {
                cfg.rl.eval_episodes = *n;
            }
            emit(&harness::cmd_eval(&cfg, &out, model.as_deref().map(Path::new))?)
        }
        Command::FullRun(_) => {
            let s = harness::cmd_full_run(&cfg, &out)?;
            emit(&serde_json::json!({
                "held_out_log_likelihood": s.imitation.held_out_log_likelihood,
                "imitation_success_rate": s.imitation_eval.success_rate,
                "final_success_rate": s.final_eval.success_rate,
                "final_ci": [s.final_eval.ci_lower, s.final_eval.ci_upper],
            }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
