use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use reslab_cli::config::{self, OUT_DIR_ENV};
use reslab_cli::{run, Command};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Run scaled-ResNet experiments: train, verify, explosion, spectral, sweep.
#[derive(Parser, Debug)]
#[command(name = "reslab", version)]
struct Cli {
    /// train | verify | explosion | spectral | sweep (overrides `command` in the config)
    command: Option<Command>,

    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set network.depth=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Size of the worker pool (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,

    /// Output directory (defaults to `out_dir`, then $RESLAB_OUT, then ./reslab-out).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_out = std::env::var(OUT_DIR_ENV).ok();
    let cfg = match config::load(
        cli.config.as_deref(),
        &cli.sets,
        cli.command,
        cli.seed,
        cli.out.as_deref(),
        env_out.as_deref(),
    ) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if cli.workers == Some(0) {
        eprintln!("config error: --workers must be >= 1");
        return ExitCode::from(EXIT_CONFIG);
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    match pool.install(|| run(&cfg)) {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
            if summary.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed: {}", summary.failed.join(", "));
                ExitCode::from(EXIT_CHECK_FAILED)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
