use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use rpo::commands::{cmd_evaluate, cmd_grid_search, cmd_oracle, cmd_sweep, cmd_train, Common};
use rpo::config::Overrides;
use rpo::core::policy_opt::BatchMode;

#[derive(Parser)]
#[command(name = "rpo", version, about = "Robust policy optimization against correlated proxy rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Shared {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides RPO_OUT_DIR and the config's `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent runs and cells (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Moment estimation mode (overrides `algorithm.mode`).
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Sampled,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write its logits, training log and manifest.
    Train(Shared),
    /// Worst / Worst* / Occ metrics for policy artifacts.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        /// Add a row for the reference policy.
        #[arg(long)]
        reference: bool,
        policies: Vec<PathBuf>,
    },
    /// Robustness sweep over sampled feature weights.
    Sweep {
        #[command(flatten)]
        shared: Shared,
        policies: Vec<PathBuf>,
    },
    /// Train across `evaluation.search_grid` and pick the best `r`.
    GridSearch(Shared),
    /// Randomized oracle suites; exits nonzero if any check fails.
    Oracle {
        #[command(flatten)]
        shared: Shared,
        /// Rerun a serialized failing case.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
}

impl Shared {
    fn common(&self) -> Result<Common> {
        if let Some(jobs) = self.jobs {
            rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
        }
        Ok(Common {
            config: self.config.clone(),
            out: self.out.clone(),
            overrides: Overrides {
                seed: self.seed,
                mode: self.mode.map(|m| match m {
                    Mode::Exact => BatchMode::Exact,
                    Mode::Sampled => BatchMode::Sampled,
                }),
            },
        })
    }
}

fn run(cli: Cli) -> Result<bool> {
    let done = |dir: PathBuf| {
        println!("wrote {}", dir.display());
        true
    };
    Ok(match cli.command {
        Command::Train(s) => done(cmd_train(&s.common()?)?),
        Command::Evaluate { shared, reference, policies } => {
            done(cmd_evaluate(&shared.common()?, &policies, reference)?)
        }
        Command::Sweep { shared, policies } => done(cmd_sweep(&shared.common()?, &policies)?),
        Command::GridSearch(s) => done(cmd_grid_search(&s.common()?)?),
        Command::Oracle { shared, replay } => {
            let (passed, reports) = cmd_oracle(&shared.common()?, replay.as_deref())?;
            for r in &reports {
                println!("{}", r.line());
                if let Some(f) = &r.failure {
                    if let Some(e) = &f.error {
                        println!("     error: {e}");
                    }
                }
            }
            println!("{}", if passed { "all oracle checks passed" } else { "oracle checks FAILED" });
            passed
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
