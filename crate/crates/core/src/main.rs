use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nngp::config::load_config;
use nngp::harness::{run_experiment, write_summary, Command, RunOptions};
use nngp::NngpError;

/// Deep Gaussian networks at finite width versus their infinite-width
/// Gaussian process limit.
///
/// Exit status: 0 all checks passed, 1 a check failed, 2 config or usage
/// error, 3 a run stage failed (partial outputs are written).
#[derive(Debug, Parser)]
#[command(name = "nngp", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true, env = "NNGP_THREADS")]
    threads: Option<usize>,

    /// Output directory, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Leave the timestamp out of report.json.
    #[arg(long, global = true)]
    no_timestamp: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Print the limit covariance of every layer.
    Kernel,
    /// Sample finite-width networks at every width of the ladder.
    SampleNet,
    /// Sample the limiting Gaussian process at the inputs.
    SampleGp,
    /// Run the width ladder with every diagnostic.
    Converge,
    /// Estimate the Hölder exponent of GP paths on the segment.
    Holder,
    /// Validate the config only.
    Check,
}

impl From<&Cmd> for Command {
    fn from(c: &Cmd) -> Self {
        match c {
            Cmd::Kernel => Command::Kernel,
            Cmd::SampleNet => Command::SampleNet,
            Cmd::SampleGp => Command::SampleGp,
            Cmd::Converge => Command::Converge,
            Cmd::Holder => Command::Holder,
            Cmd::Check => Command::Check,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let Some(path) = cli.config.as_ref() else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be >= 1");
        return ExitCode::from(2);
    }
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let cmd = Command::from(&cli.command);
    if cmd == Command::Check {
        println!("config ok: {}", path.display());
        return ExitCode::SUCCESS;
    }
    let opts = RunOptions {
        threads: cli.threads,
        out_dir: cli.out.clone(),
        timestamp: !cli.no_timestamp,
        ..RunOptions::default()
    };
    match run_experiment(cmd, &cfg, &opts) {
        Ok(outcome) => {
            let _ = write_summary(std::io::stdout().lock(), &outcome);
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e @ NngpError::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
