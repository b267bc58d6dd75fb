use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sitelasso::config::{RunConfig, OUTPUT_ENV};
use sitelasso::geo::{generate_synthetic, SyntheticSpec};
use sitelasso::pipeline::{execute_run, execute_transfer, verify_run, write_synthetic};
use sitelasso::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "sitelasso", version, about = "Multi-site LASSO ensembles for point and raster prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured methods and write every artifact.
    Run {
        config: PathBuf,
        /// Worker threads; overrides the config value.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate a synthetic two-site dataset.
    Synth {
        spec: PathBuf,
        /// Output directory (default: `data` next to the spec).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict target points with a stored site-specific ensemble.
    Transfer {
        run_dir: PathBuf,
        target: PathBuf,
        /// Ensemble label such as `m1-b1`; needed when the run has several.
        #[arg(long)]
        method: Option<String>,
        /// Output directory (default: `transfer` inside the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check output files against the run manifest.
    Verify { run_dir: PathBuf },
}

fn env_dir() -> Option<PathBuf> {
    std::env::var(OUTPUT_ENV).ok().filter(|s| !s.is_empty()).map(PathBuf::from)
}

fn load_spec(path: &Path) -> Result<SyntheticSpec, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, workers } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(w) = workers {
                if w == 0 {
                    return Err(Error::Config("workers must be at least 1".into()));
                }
                cfg.workers = w;
            }
            let manifest = execute_run(&cfg)?;
            println!(
                "wrote {} files to {} (plan {})",
                manifest.files.len() + 1,
                cfg.output.display(),
                manifest.plan_id
            );
        }
        Command::Synth { spec, out, seed } => {
            let mut s = load_spec(&spec)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let dir = out
                .or_else(env_dir)
                .unwrap_or_else(|| spec.parent().unwrap_or(Path::new(".")).join("data"));
            let data = generate_synthetic(&s)?;
            let files = write_synthetic(&data, &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Transfer {
            run_dir,
            target,
            method,
            out,
        } => {
            let dir = out.or_else(env_dir).unwrap_or_else(|| run_dir.join("transfer"));
            let report = execute_transfer(&run_dir, &target, method.as_deref(), &dir)?;
            println!(
                "{} (fitted to {}): R² {:.4}, RMSE {:.4}; wrote {}",
                report.method,
                report.source_site,
                report.r_squared,
                report.rmse,
                dir.display()
            );
        }
        Command::Verify { run_dir } => {
            let bad = verify_run(&run_dir)?;
            if !bad.is_empty() {
                return Err(Error::InvalidInput(format!("files differ from the manifest: {}", bad.join(", "))));
            }
            println!("all files match the manifest");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(ErrorClass::Config.exit_code() as u8);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            let kind = match class {
                ErrorClass::Numerical => "numerical error",
                ErrorClass::Config => "config error",
                ErrorClass::Data => "data error",
            };
            eprintln!("sitelasso: {kind}: {e}");
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
