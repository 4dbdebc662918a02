use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use brrep::experiments_cli::report::{oracle_table, series};
use brrep::experiments_cli::{
    collapse_fit, find_crossing, read_rows, run_experiment, Ansatz, Curve, ExperimentConfig, ExperimentKind,
    RunOptions,
};

#[derive(Parser)]
#[command(name = "brrep", version, about = "Two-replica MPS simulations of Brownian circuits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a JSON config; resumes unless --fresh.
    Run {
        config: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        fresh: bool,
    },
    /// Crossing of per-N curves of one observable against t (or lambda N
    /// for the `ratio` rows).
    Crossing {
        csv: PathBuf,
        #[arg(long, default_value = "ratio")]
        observable: String,
    },
    /// Data collapse of one observable's per-N curves.
    Collapse {
        csv: PathBuf,
        #[arg(long, value_enum)]
        ansatz: Ansatz,
        #[arg(long, default_value = "collision")]
        observable: String,
        /// Search interval(s) as lo,hi; two are needed for field_first_order.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        bounds: Option<Vec<f64>>,
    },
    /// Replica prediction against Brownian trajectory Monte Carlo.
    OracleCheck {
        config: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Per-N curves from a CSV; `ratio` rows are laid out against lambda N.
fn curves(csv: &PathBuf, observable: &str) -> brrep::Result<Vec<Curve>> {
    let rows = read_rows(csv)?;
    if observable == "ratio" {
        return Ok(brrep::experiments_cli::report::xeb_scaled_curves(&rows));
    }
    Ok(series(&rows, observable, None).into_iter().map(|(n, p)| Curve::new(n, p)).collect())
}

fn run(cli: Cli) -> brrep::Result<()> {
    match cli.command {
        Command::Run { config, jobs, fresh } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rec = run_experiment(&cfg, &RunOptions { jobs, fresh })?;
            println!("{} rows -> {}", rec.rows, cfg.csv_path().display());
            println!("summary -> {}", cfg.summary_path().display());
            for f in &rec.failures {
                eprintln!("failed {}: {}", f.job, f.error);
            }
        }
        Command::Crossing { csv, observable } => {
            let c = find_crossing(&curves(&csv, &observable)?)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
        Command::Collapse { csv, ansatz, observable, bounds } => {
            let cs = curves(&csv, &observable)?;
            let bounds: Vec<(f64, f64)> = match bounds {
                Some(b) if b.len() % 2 == 0 && b.len() <= 4 => b.chunks(2).map(|c| (c[0], c[1])).collect(),
                Some(_) => return Err(brrep::Error::Config("--bounds takes one or two lo,hi pairs".into())),
                None => match ansatz {
                    Ansatz::FieldFirstOrder => vec![(0.0, 2.0), (1.0, 3.0)],
                    _ => vec![(0.0, 4.0)],
                },
            };
            let r = collapse_fit(&cs, ansatz, &bounds)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::OracleCheck { config, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            if cfg.experiment != ExperimentKind::OracleCheck {
                return Err(brrep::Error::Config("oracle-check needs an oracle_check config".into()));
            }
            run_experiment(&cfg, &RunOptions { jobs, fresh: true })?;
            let rows = read_rows(&cfg.csv_path())?;
            println!("{:>2} {:>10} {:>7} {:>14} {:>11} {:>14} {:>14} {:>6}", "N", "observable", "lambda", "monte_carlo", "stderr", "replica", "mps", "z");
            for l in oracle_table(&rows) {
                let mps = l.mps.map_or("-".to_string(), |v| format!("{v:.8}"));
                println!(
                    "{:>2} {:>10} {:>7} {:>14.8} {:>11.2e} {:>14.8} {:>14} {:>6.2}",
                    l.n, l.observable, l.lambda, l.monte_carlo, l.stderr, l.replica, mps, l.z_score
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
