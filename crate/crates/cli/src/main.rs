mod artifacts;
mod config;
mod diff;
mod error;
mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  other error
  2  config schema violation
  3  solver did not converge
  4  integrator blow-up (non-finite values, displacement cap, negative density)
  5  I/O error
  6  artifacts not comparable (diff)

On failure `run` writes error.json into the output directory.";

#[derive(Parser)]
#[command(name = "tabf", version, about = "Adaptive biasing force experiments on the flat torus", after_help = EXIT_CODES)]
struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `simulation.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Per-column RMS and max differences of the CSV files two runs share.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(seed) = seed {
        match cfg.simulation.as_mut() {
            Some(sim) => sim.seed = seed,
            None => return Err(CliError::Schema("--seed given but the config has no [simulation]".into())),
        }
    }
    Ok(cfg)
}

fn write_error(dir: &Path, err: &CliError) {
    if fs::create_dir_all(dir).is_ok() {
        if let Ok(text) = tabf::export::to_sorted_json(&err.record()) {
            let _ = fs::write(dir.join("error.json"), text);
        }
    }
}

fn run(config: &Path, output_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut dir = output_dir.clone().unwrap_or_else(|| PathBuf::from("tabf-output"));
    let result = load_config(config, seed).and_then(|cfg| {
        if let (None, Some(d)) = (&output_dir, &cfg.output_dir) {
            dir = d.clone();
        }
        experiments::run(&cfg, &dir)
    });
    match result {
        Ok(manifest) => {
            println!(
                "{} finished: {} files in {} (config {})",
                manifest.experiment,
                manifest.files.len(),
                dir.display(),
                &manifest.config_hash[..12]
            );
            Ok(())
        }
        Err(e) => {
            write_error(&dir, &e);
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(error::exit::OTHER as u8);
        }
    }
    let result = match cli.command {
        Command::Run {
            config,
            output_dir,
            seed,
        } => run(&config, output_dir, seed),
        Command::Diff { a, b, output } => diff::diff_dirs(&a, &b).and_then(|report| {
            let text = tabf::export::to_sorted_json(&report)?;
            if let Some(path) = output {
                fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
            }
            print!("{text}");
            eprintln!("largest absolute difference: {:e}", report.max_abs());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::from(error::exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
