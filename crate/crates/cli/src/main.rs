use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emloc_cli::app::{self, RunOptions};
use emloc_cli::config::Overrides;

#[derive(Parser)]
#[command(
    name = "emloc",
    version,
    about = "Near-field EM source localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment.
    Run(Common),
    /// Check a configuration and print the effective settings.
    Validate(Common),
    /// Build the reference LR distributions.
    LrDist(Common),
    /// Recompute the aggregates of a finished run and compare them.
    Verify {
        /// Output directory of the run.
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

impl Common {
    fn options(self) -> RunOptions {
        RunOptions {
            config: self.config,
            overrides: Overrides {
                seed: self.seed,
                trials: self.trials,
                experiment: None,
            },
            reference_seed: None,
            workers: self.workers,
            out_dir: self.out_dir,
        }
    }
}

fn execute(opts: RunOptions) -> emloc_cli::Result<ExitCode> {
    let report = app::run(&opts)?;
    for n in &report.notices {
        eprintln!("notice: {n}");
    }
    let m = &report.manifest;
    match &m.error {
        Some(e) => {
            eprintln!("run failed after {} rows: {e}", m.rows);
            Ok(ExitCode::FAILURE)
        }
        None => {
            println!(
                "{}: {} rows written to {}",
                m.experiment,
                m.rows,
                opts.out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn dispatch(cli: Cli) -> emloc_cli::Result<ExitCode> {
    match cli.command {
        Command::Run(c) => execute(c.options()),
        Command::LrDist(c) => execute(app::lr_dist_options(c.options())),
        Command::Validate(c) => {
            let r = app::resolve(&c.options())?;
            for n in &r.notices {
                eprintln!("notice: {n}");
            }
            print!("{}", r.config.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { out_dir } => {
            app::verify(&out_dir)?;
            println!("aggregates in {} verified", out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
