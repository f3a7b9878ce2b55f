//! `slr-recon`: dataset synthesis, SLR solvers, unrolled training and
//! inference, the annihilation probe and metrics, driven by one JSON config.

mod config;
mod pipelines;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::Pipeline;

#[derive(Debug, Parser)]
#[command(name = "slr-recon", version, about)]
struct Cli {
    /// Pipeline to run.
    #[arg(value_enum)]
    pipeline: Pipeline,

    /// Experiment config (JSON). Defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set model.K=0`. The value is read as
    /// JSON and falls back to a plain string. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match config::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(errs) => return config_failure(&errs),
    };
    let errs = config::validate(&cfg, cli.pipeline);
    if !errs.is_empty() {
        return config_failure(&errs);
    }
    if let Some(n) = std::env::var("SLR_RECON_THREADS").ok().filter(|v| !v.is_empty()) {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: could not size the thread pool: {e}");
                    return ExitCode::from(EXIT_RUNTIME);
                }
            }
            _ => return config_failure(&[format!("SLR_RECON_THREADS must be a positive integer, got `{n}`")]),
        }
    }
    match pipelines::run(&cfg, cli.pipeline) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn config_failure(errs: &[String]) -> ExitCode {
    eprintln!("invalid configuration:");
    for e in errs {
        eprintln!("  - {e}");
    }
    ExitCode::from(EXIT_CONFIG)
}
