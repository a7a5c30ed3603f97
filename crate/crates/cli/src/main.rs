mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cusplab::Error;

use commands::Artifact;

#[derive(Parser)]
#[command(name = "cusplab", version, about = "Random holomorphic sections on cusped surfaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Master seed, overriding `seed.master`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the curvature conditions of the configured model
    ModelCheck,
    /// Build and export orthonormal bases for each p
    Basis,
    /// Bergman density, its sup and near-diagonal profiles
    Bergman,
    /// Run the configured Monte Carlo experiment
    Experiment,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_NUMERICAL })
}

fn finish(cli: &Cli, config: &config::Resolved, artifacts: &[Artifact]) -> ExitCode {
    match output::write_run(&cli.out, config, artifacts) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: writing outputs: {e}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(EXIT_VALIDATION);
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: reading {}: {e}", path.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let resolved = match config::parse(&text, cli.seed) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };

    if let Command::ModelCheck = cli.command {
        let model = match config::build_model(&resolved) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        return match commands::model_check(&model) {
            Ok((report, artifacts)) => {
                let code = finish(&cli, &resolved, &artifacts);
                if code != ExitCode::SUCCESS {
                    return code;
                }
                if report.pass {
                    ExitCode::SUCCESS
                } else {
                    eprintln!("model conditions fail: min curvature ratio {:.3e}", report.min_ratio);
                    ExitCode::from(EXIT_VALIDATION)
                }
            }
            Err(e) => fail(&e),
        };
    }

    let need_experiment = matches!(cli.command, Command::Experiment);
    let validated = match config::validate(resolved, cli.workers, need_experiment) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let result = match cli.command {
        Command::Basis => commands::basis(&validated),
        Command::Bergman => commands::bergman(&validated),
        Command::Experiment => commands::experiment(&validated),
        Command::ModelCheck => unreachable!(),
    };
    match result {
        Ok(artifacts) => finish(&cli, &validated.config, &artifacts),
        Err(e) => fail(&e),
    }
}
