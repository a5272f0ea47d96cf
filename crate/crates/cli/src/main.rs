use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dum_lab::config::{self, ExperimentConfig};
use dum_lab::experiment::{self, RunOptions};
use dum_lab::{recipes, sweep, CliError, CliResult};

#[derive(Parser)]
#[command(name = "dum-lab", version, about = "Run deterministic uncertainty method experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a config.
    Run {
        config: PathBuf,
        /// Comma-separated seeds overriding the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Replace an existing results directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of one leaf.
    Sweep {
        config: PathBuf,
        /// Dotted config path, e.g. `encoder.latent_dim` or `train.phases[1].head_lr`.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the canonical experiment configs.
    Recipes {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dum-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Run { config, seeds, force, out } => {
            let outcome = experiment::run_path(&config, seeds, out, force)?;
            println!("{}", outcome.dir.display());
            for m in &outcome.summary.report.metrics {
                println!("{:<20} {:<14} {}", m.metric, m.dataset, m.summary.format(1.0));
            }
        }
        Command::Sweep { config: path, axis, values, seeds, force, out } => {
            let cfg = ExperimentConfig::load(&path)?;
            let (axis, values) = match (axis, values, &cfg.sweep) {
                (Some(a), Some(v), _) => (a, v.iter().map(|s| sweep::parse_value(s)).collect()),
                (None, None, Some(s)) => (s.axis.clone(), s.values.clone()),
                (None, None, None) => {
                    return Err(CliError::Usage("config has no [sweep]; pass --axis and --values".into()))
                }
                _ => return Err(CliError::Usage("--axis and --values go together".into())),
            };
            let opts = RunOptions { out, seeds, force, data_dir: config::data_dir(path.parent()) };
            let outcome = sweep::run_sweep(&cfg, &axis, &values, &opts)?;
            println!("{}", outcome.csv.display());
        }
        Command::Recipes { out } => {
            for p in recipes::emit(&out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
