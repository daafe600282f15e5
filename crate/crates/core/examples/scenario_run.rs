// Run a bundled scenario file from code and inspect the report.

use std::path::{Path, PathBuf};

use lyacert::scenario::{run_scenario, RunError, RunOptions};

pub fn run_example() -> Result<bool, RunError> {
    let scenario = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/synthetic_coupled.toml");
    let out_dir = std::env::temp_dir().join("lyacert-example-synthetic-coupled");
    let out = run_scenario(
        &scenario,
        &RunOptions {
            output_dir: Some(PathBuf::from(&out_dir)),
            ..Default::default()
        },
    )?;
    println!(
        "δ = {:.6}, γ = {:.6}",
        out.report.certificate.delta, out.report.certificate.gamma
    );
    for t in &out.report.trajectories {
        println!("x0[{}] = {:?} failed checks: {:?}", t.index, t.x0, t.failed_checks);
    }
    println!("exit code {} -> {}", out.exit_code, out.output_dir.display());
    Ok(out.report.overall_pass)
}

#[allow(dead_code)]
fn main() -> Result<(), RunError> {
    run_example().map(|_| ())
}
