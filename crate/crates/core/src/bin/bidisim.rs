use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bidisim::harness::{load_config, method_kind, run_experiment, select_workers, write_selection_csv, RunContext};
use bidisim::Error;

#[derive(Parser)]
#[command(name = "bidisim", version, about = "Virtual-time simulator for bidirectionally compressed SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and write traces plus a summary.
    Simulate {
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `parallelism`.
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Choose the worker subset for the configured cluster (CSV on stdout).
    SelectWorkers { config: PathBuf },
    /// Print theorem-mode parameters for one method as JSON.
    Tune {
        config: PathBuf,
        #[arg(long)]
        method: String,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ALL_DIVERGED: u8 = 3;

fn exec(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            parallelism,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            if let Some(p) = parallelism {
                cfg.parallelism = p;
            }
            let report = run_experiment(&cfg)?;
            for m in &report.methods {
                match m.best() {
                    Some(b) => eprintln!(
                        "{}: cell {} gamma={} median time {} s",
                        m.label, b.cell.index, b.cell.gamma, b.median_time_s
                    ),
                    None => eprintln!("{}: every cell diverged", m.label),
                }
            }
            eprintln!("wrote {}", report.out_dir.display());
            if report.any_all_diverged() {
                return Ok(ExitCode::from(EXIT_ALL_DIVERGED));
            }
        }
        Command::SelectWorkers { config } => {
            let cfg = load_config(&config)?;
            let sel = select_workers(&cfg)?;
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_selection_csv(&sel, &mut lock)?;
            lock.flush()?;
        }
        Command::Tune { config, method } => {
            let cfg = load_config(&config)?;
            let kind = method_kind(&method)?;
            let tuned = RunContext::from_config(&cfg)?.tune(kind)?;
            println!("{}", serde_json::to_string_pretty(&tuned)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Json(_) => ExitCode::from(EXIT_CONFIG),
                Error::AllDiverged => ExitCode::from(EXIT_ALL_DIVERGED),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
