use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfuq_cli::{run, write_outputs, CliError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "sfuq", version, about = "Worst-case slow-fast UQ experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an experiment and write its CSVs and report.json.
    Run {
        config: PathBuf,
        /// Output directory (overrides the configuration).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the configuration).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Parse and check a configuration without running it.
    Validate { config: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!(
                "{}: ok ({})",
                config.display(),
                cfg.experiment.kind.section()
            );
            Ok(())
        }
        Command::Run {
            config,
            out,
            seed,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seed = s;
            }
            if let Some(n) = threads {
                if n == 0 {
                    return Err(CliError::Config("--threads must be positive".into()));
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Config(e.to_string()))?;
            }
            let dir = out
                .or_else(|| cfg.experiment.out.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.kind.section()));
            let result = run(&cfg)?;
            write_outputs(&dir, &result.files, &result.report)?;
            for e in &result.report.headline {
                println!("{} = {}", e.name, e.value);
            }
            println!(
                "wrote {} files to {} in {:.1} s",
                result.files.len() + 1,
                dir.display(),
                result.report.wall_clock_seconds
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
