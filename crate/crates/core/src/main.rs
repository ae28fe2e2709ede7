use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::cli::{parse_config_file, run, validate, RunOptions};
use fedsim::Error;

/// Federated-learning backdoor simulator.
#[derive(Parser)]
#[command(name = "fedsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every seeded run described by a config file.
    Run {
        /// Experiment config file.
        config: PathBuf,
        /// Output directory for per-run results.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Suppress per-run progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Check a config file and print every resolved value.
    Validate {
        /// Experiment config file.
        config: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        // Anything wrong with the inputs is a usage error.
        Error::Parse { .. } | Error::Config(_) | Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            threads,
            quiet,
        } => parse_config_file(&config).and_then(|raw| {
            run(
                &raw,
                &RunOptions {
                    out_dir: out,
                    threads,
                    quiet,
                },
            )
            .map(|_| ())
        }),
        Command::Validate { config } => parse_config_file(&config).and_then(|raw| {
            let report = validate(&raw)?;
            print!("{report}");
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
