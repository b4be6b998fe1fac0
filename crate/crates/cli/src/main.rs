//! `irepair` — train tiny GPT-style models on a synthetic detox task,
//! localize the most error-prone transformer block per batch, and repair
//! it selectively; includes full-parameter baselines, ablations, and the
//! evaluation/accounting reports.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use irepair_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use commands::Workspace;
use config::{ExperimentConfig, ScorerKind, Technique};

#[derive(Parser)]
#[command(name = "irepair", version, about)]
struct Cli {
    /// Experiment config (TOML); built-in toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory holding datasets, checkpoints, runs and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the toxicity scorer: lexicon | remote.
    #[arg(long, global = true)]
    scorer: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the clean corpus and paired bad/good demonstrations.
    Synth,
    /// Train the base (contaminated) model on the mixed corpus.
    TrainBase,
    /// Run one repair technique against the base checkpoint.
    Repair {
        /// dapt | dapt-kl | irepair | irepair-kl | irepair-min | irepair-fixed
        #[arg(long)]
        technique: String,
    },
    /// Evaluate toxicity and clean perplexity for vanilla plus named runs.
    Eval {
        /// Run names to include (defaults to every existing run).
        #[arg(long, num_args = 0..)]
        runs: Vec<String>,
    },
    /// Per-block sensitivity CSV and density summary for a checkpoint.
    Analyze {
        /// Checkpoint to analyze (defaults to the base model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cost comparison across completed runs.
    Flops {
        #[arg(long, num_args = 1..)]
        runs: Vec<String>,
    },
    /// Full pipeline: synth, train-base, all six techniques, eval, flops,
    /// analyze.
    Sweep,
    /// Print the built-in toy config as TOML.
    PrintConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Cmd::PrintConfig = cli.cmd {
        print!("{}", ExperimentConfig::default_toy().to_toml()?);
        return Ok(());
    }

    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_toy(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(kind) = &cli.scorer {
        config.scorer.kind = match kind.as_str() {
            "lexicon" => ScorerKind::Lexicon,
            "remote" => ScorerKind::Remote,
            other => {
                return Err(Error::Usage(format!(
                    "unknown scorer {other:?}; valid: lexicon, remote"
                )))
            }
        };
        config.validate()?;
    }
    let out = cli
        .out
        .ok_or_else(|| Error::Usage("--out DIR is required for this command".into()))?;
    let ws = Workspace::new(out, config);

    match cli.cmd {
        Cmd::Synth => commands::cmd_synth(&ws),
        Cmd::TrainBase => commands::cmd_train_base(&ws),
        Cmd::Repair { technique } => {
            let t = Technique::parse(&technique)?;
            commands::cmd_repair(&ws, t)
        }
        Cmd::Eval { runs } => {
            let runs = if runs.is_empty() { existing_runs(&ws) } else { runs };
            commands::cmd_eval(&ws, &runs)
        }
        Cmd::Analyze { checkpoint } => commands::cmd_analyze(&ws, checkpoint.as_deref()),
        Cmd::Flops { runs } => commands::cmd_flops(&ws, &runs),
        Cmd::Sweep => commands::cmd_sweep(&ws),
        Cmd::PrintConfig => unreachable!("handled above"),
    }
}

/// Runs already present in the output directory, in the canonical
/// technique order.
fn existing_runs(ws: &Workspace) -> Vec<String> {
    config::TECHNIQUE_NAMES
        .iter()
        .filter(|name| ws.out.join("runs").join(name).join("checkpoint.ckpt").exists())
        .map(|s| s.to_string())
        .collect()
}
