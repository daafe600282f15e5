use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lyacert::scenario::{list_builtins, run_scenario, validate_scenario, RunOptions, EXIT_RUNTIME, EXIT_VALIDATION};

#[derive(Parser)]
#[command(
    name = "lyacert",
    version,
    about = "Lyapunov certificates and convergence rates along simulated trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write report.json plus CSV artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dense_dt: Option<f64>,
    },
    /// Check a scenario without integrating.
    Validate { scenario: PathBuf },
    /// List built-in systems and objectives.
    ListBuiltins,
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            scenario,
            output_dir,
            seed,
            dense_dt,
        } => {
            let opts = RunOptions {
                output_dir,
                seed,
                dense_dt,
            };
            match run_scenario(&scenario, &opts) {
                Ok(out) => {
                    for t in &out.report.trajectories {
                        let status = if t.failed_checks.is_empty() {
                            "ok".to_string()
                        } else {
                            format!("failed: {}", t.failed_checks.join(", "))
                        };
                        println!("x0[{}] {status}", t.index);
                    }
                    if let Some(v) = &out.report.stability {
                        println!("stability {}", v.verdict);
                    }
                    println!(
                        "overall_pass {} -> {}",
                        out.report.overall_pass,
                        out.output_dir.join("report.json").display()
                    );
                    code(out.exit_code)
                }
                Err(e) => {
                    eprintln!("{e}");
                    code(e.exit_code())
                }
            }
        }
        Command::Validate { scenario } => match validate_scenario(&scenario) {
            Ok(d) if d.is_empty() => {
                println!("valid");
                ExitCode::SUCCESS
            }
            Ok(d) => {
                for m in d {
                    eprintln!("{m}");
                }
                code(EXIT_VALIDATION)
            }
            Err(e) => {
                eprintln!("cannot read {}: {e}", scenario.display());
                code(EXIT_RUNTIME)
            }
        },
        Command::ListBuiltins => {
            for l in list_builtins() {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
    }
}
