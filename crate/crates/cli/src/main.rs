use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hjb_bsde::compare::compare_report;
use hjb_bsde::config::ExperimentConfig;
use hjb_bsde::run::{run_experiment, RunOptions};
use hjb_bsde::CliResult;

#[derive(Parser)]
#[command(
    name = "hjb-bsde",
    version,
    about = "Penalized BSDE, dual and finite-difference HJB experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write `paths.csv`.
        #[arg(long)]
        dump_paths: bool,
        /// Worker threads; overrides `workers`.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Merge summary files and flag monotonicity or domination failures.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            dump_paths,
            workers,
        } => {
            let resolved = ExperimentConfig::load(&config)?.resolve()?;
            if workers == Some(0) {
                return Err(hjb_bsde::CliError::Config("`--workers`: must be positive".into()));
            }
            let report = run_experiment(
                &resolved,
                &RunOptions {
                    out_dir: out,
                    dump_paths,
                    workers,
                },
            )?;
            for r in &report.rows {
                println!("{:<24} {:>8} {:>12.6} ± {:.6}", r.scheme, r.penalty, r.mean, r.stderr);
            }
            println!("artifacts in {}", report.out_dir.display());
            Ok(true)
        }
        Command::Compare { files } => {
            let report = compare_report(&files)?;
            print!("{}", report.render());
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("hjb-bsde: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
