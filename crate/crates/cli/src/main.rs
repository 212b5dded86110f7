use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfedpt_cli::{parse_config, run, sweep, RunOptions};

#[derive(Parser)]
#[command(name = "pfedpt", version, about = "Federated learning with client-local visual prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured algorithm on one partition.
    Run(Common),
    /// Run the first algorithm over the [sweep] template × size grid.
    Sweep(Common),
    /// Parse and validate a config, then print it with defaults filled in.
    Check {
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory, overriding output.directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
    /// Concurrent client trainers; results do not depend on it.
    #[arg(short, long)]
    workers: Option<usize>,
    #[arg(long, default_value = "info")]
    log_level: log::LevelFilter,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Check { config } => parse_config(&config).and_then(|cfg| {
            println!("{}", toml::to_string_pretty(&cfg)?);
            Ok(())
        }),
        Command::Run(c) => {
            init_logging(c.log_level);
            parse_config(&c.config).and_then(|cfg| run(&cfg, &options(&c)).map(drop))
        }
        Command::Sweep(c) => {
            init_logging(c.log_level);
            parse_config(&c.config).and_then(|cfg| sweep(&cfg, &options(&c)).map(drop))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn options(c: &Common) -> RunOptions {
    RunOptions {
        output: c.output.clone(),
        overwrite: c.overwrite,
        workers: c.workers,
    }
}

fn init_logging(level: log::LevelFilter) {
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}
