use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hiersim::config::{parse_config, ExperimentConfig, ExperimentKind};
use hiersim::run::{run, RunOptions};

#[derive(Parser)]
#[command(
    name = "hiersim",
    version,
    about = "Spatial population model simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its outputs and manifest.
    Run {
        config: PathBuf,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Replica count (overrides the config).
        #[arg(long)]
        replicas: Option<usize>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a config and print its canonical form and hash.
    Validate { config: PathBuf },
    /// Describe an experiment kind and print an example config.
    Describe {
        #[arg(value_enum)]
        kind: ExperimentKind,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(1)
    })?;
    parse_config(&text).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}

fn describe(kind: ExperimentKind) {
    let example = ExperimentConfig::example(kind);
    let names = |blocks: &[hiersim::config::Block]| {
        blocks
            .iter()
            .map(|b| format!("[{}]", b.key()))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("{kind}: {}", kind.summary());
    println!("required blocks: {}", names(kind.required()));
    if !kind.optional().is_empty() {
        println!("optional blocks: {}", names(kind.optional()));
    }
    println!(
        "\n# example with defaults filled in\n{}",
        example.canonical_toml()
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Describe { kind } => {
            describe(kind);
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match load(&config) {
            Ok(c) => {
                println!("# config hash {}\n{}", c.hash(), c.canonical_toml());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run {
            config,
            seed,
            replicas,
            out_dir,
            jobs,
        } => {
            let mut c = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(r) = replicas {
                c.replicas = r;
            }
            let out_dir = out_dir.unwrap_or_else(|| PathBuf::from(&c.output.dir));
            match run(&c, &RunOptions { out_dir, jobs }) {
                Ok(outcome) => {
                    let m = &outcome.manifest;
                    eprintln!(
                        "{}: {} of {} replicas, {} files in {} ({:.2}s)",
                        m.kind,
                        m.replicas_completed,
                        m.replicas_requested,
                        m.files.len(),
                        outcome.out_dir.display(),
                        m.wall_time_seconds
                    );
                    if outcome.exit_code() != 0 {
                        eprintln!("error: compute budget exceeded; results are partial");
                    }
                    ExitCode::from(outcome.exit_code())
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code())
                }
            }
        }
    }
}
