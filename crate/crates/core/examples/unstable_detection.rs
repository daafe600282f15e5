// ẋ = x with the candidate V = ½x², N = x². The decay check flags every
// sample and the stability probe refuses to certify anything.

use lyacert::certificates::{optimal_delta, slope_bound_for, verify_strict_decay, LyapunovPair};
use lyacert::dynamics::{integrate, IntegratorConfig, SystemSpec};
use lyacert::rates::{classify_stability, CriticalSetSpec, ProbeConfig, Verdict};

pub fn run_example() -> lyacert::error::Result<(usize, Verdict)> {
    let sys = SystemSpec::new("growth", 1, |x, out| out[0] = x[0]);
    let pair = LyapunovPair::single(|x| 0.5 * x[0] * x[0], |x| x[0] * x[0], |_| 0.0).with_wdot(|x| x[0] * x[0]);
    let cert = optimal_delta(&slope_bound_for(&pair)?)?;
    let integ = IntegratorConfig::with_horizon(5.0);
    let traj = integrate(&sys, &[0.1], &integ)?;
    let decay = verify_strict_decay(&traj, &pair, &cert, None)?;
    println!(
        "{} of {} samples violate Ẇ + γN <= 0",
        decay.violation_times.len(),
        traj.len()
    );
    let v = classify_stability(
        &sys,
        &CriticalSetSpec::point(vec![0.0])?,
        &ProbeConfig::default(),
        &integ,
        true,
    )?;
    println!("verdict {} with {} failing rows", v.verdict, v.failing_rows.len());
    Ok((decay.violation_times.len(), v.verdict))
}

#[allow(dead_code)]
fn main() -> lyacert::error::Result<()> {
    run_example().map(|_| ())
}
