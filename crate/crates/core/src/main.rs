//! `grsio` command line: runs one experiment and writes its report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use grsio::error::Error;
use grsio::harness::{run, Command, ExperimentConfig, EXIT_CONFIG, EXIT_FAIL};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Sub {
    GeometrySelftest,
    Logn,
    Carleson,
    Differentiation,
    TilesTrees,
    Frame,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::GeometrySelftest => Command::GeometrySelftest,
            Sub::Logn => Command::Logn,
            Sub::Carleson => Command::Carleson,
            Sub::Differentiation => Command::Differentiation,
            Sub::TilesTrees => Command::TilesTrees,
            Sub::Frame => Command::Frame,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "grsio", about = "Directional multiplier experiments on the Grassmannian")]
struct Cli {
    #[arg(value_enum)]
    subcommand: Sub,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for report.json and the CSV tables.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated direction counts.
    #[arg(long = "N-list", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return exit(EXIT_CONFIG);
        }
    };
    let mut cfg = match ExperimentConfig::from_file(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return exit(EXIT_CONFIG);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(n) = cli.n {
        cfg.n = n;
        cfg.d = None;
    }
    if let Some(a) = cli.alpha {
        cfg.alpha = a;
    }
    if let Some(l) = cli.n_list {
        cfg.n_list = l;
    }
    match run(cli.subcommand.into(), &cfg) {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            exit(report.exit_code())
        }
        Err(e @ (Error::Config(_) | Error::InvalidArgument(_) | Error::Precondition(_) | Error::UnknownLabel(_))) => {
            eprintln!("{e}");
            exit(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("{e}");
            exit(EXIT_FAIL)
        }
    }
}
