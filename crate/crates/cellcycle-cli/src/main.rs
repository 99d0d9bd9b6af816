use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cellcycle_cli::commands::{self, write_plot_script};
use cellcycle_cli::config::ConfigSource;
use cellcycle_cli::error::{CliError, Result, EXIT_CONFIG};

/// Age-size structured cell population solver.
#[derive(Debug, Parser)]
#[command(name = "cellcycle", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// INI configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for sweeps; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Also write a matplotlib script `plot.py` into the output directory.
    #[arg(long, global = true)]
    emit_plot_script: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Leading eigenpair. Writes summary.txt, N.csv (a,x,N) and phi.csv (a,x,phi).
    Eigen,
    /// Transport run against the eigenpair. Writes observables.csv
    /// (t,mass,duality,entropy,distance), snapshot_<t>.csv (a,x,n) and summary.txt.
    Simulate,
    /// Proliferating/quiescent run. Writes trajectory.csv (t,N,P,Q,G,S2,R) and summary.txt.
    Twophase,
    /// Assumption checks. Writes report.csv (check,value,threshold,pass) and summary.txt.
    Validate,
    /// Repeat a command over values of one key. Writes sweep.csv
    /// (value,status,exit_code,<summary keys>) and summary.txt.
    Sweep,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Eigen => "eigen",
            Command::Simulate => "simulate",
            Command::Twophase => "twophase",
            Command::Validate => "validate",
            Command::Sweep => "sweep",
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Missing {
        key: "--config".into(),
    })?;
    let source = ConfigSource::load(path)?;
    let config = source.to_config()?;
    let threads = cli.threads.unwrap_or(config.threads).max(1);
    // a pool that already exists is fine
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    let out = &cli.out;
    let summary = match cli.command {
        Command::Eigen => commands::run_eigen(&config, out)?,
        Command::Simulate => commands::run_simulate(&config, out)?,
        Command::Twophase => commands::run_twophase(&config, out)?,
        Command::Validate => commands::run_validate(&config, out)?,
        Command::Sweep => commands::run_sweep(&source, out)?,
    };
    print!("{}", summary.render());
    if cli.emit_plot_script {
        write_plot_script(cli.command.name(), out)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
