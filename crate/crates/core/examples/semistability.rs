// A line of minimizers: DIN on ½(x₁ + x₂ - 1)². Each trajectory settles at
// its own point of the line and the equilibrium set is classified as
// semistable.

use lyacert::case_studies::{din_critical_set, din_system, least_squares_line, DinParams};
use lyacert::dynamics::IntegratorConfig;
use lyacert::rates::{classify_stability, ProbeConfig, Verdict};

pub fn run_example() -> lyacert::error::Result<Verdict> {
    let obj = least_squares_line();
    let sys = din_system(&obj, &DinParams::new(1.0, 1.0))?;
    let set = din_critical_set(&obj)?;
    let probe = ProbeConfig {
        initial_states: vec![
            vec![2.0, 0.0, 0.0, 0.0],
            vec![0.0, -1.0, 0.0, 0.0],
            vec![-1.0, 0.5, 0.0, 0.0],
        ],
        ..ProbeConfig::default()
    };
    let v = classify_stability(&sys, &set, &probe, &IntegratorConfig::with_horizon(100.0), true)?;
    for row in v.convergence_table.iter().rev().take(3) {
        println!("{:<24} limit {:?}  drift {:.2e}", row.label, row.limit_point, row.drift);
    }
    println!("verdict {}", v.verdict);
    Ok(v.verdict)
}

#[allow(dead_code)]
fn main() -> lyacert::error::Result<()> {
    run_example().map(|_| ())
}
