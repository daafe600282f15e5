// Inertial dynamics with Hessian damping on the Rosenbrock function.
// The energy derivative is cross-checked against finite differences and the
// velocity and gradient observables are shown to vanish.

use lyacert::case_studies::{din_energy, din_system, rosenbrock2, DinParams};
use lyacert::certificates::{optimal_delta, slope_bound_for, vanishing_from_series, verify_strict_decay};
use lyacert::dynamics::{evaluate_along, integrate, IntegratorConfig};

pub fn run_example() -> lyacert::error::Result<bool> {
    let obj = rosenbrock2();
    let p = DinParams::new(1.0, 1.0);
    let sys = din_system(&obj, &p)?;
    let energy = din_energy(&obj, &p)?;

    let traj = integrate(&sys, &[0.0, 0.0, 0.0, 0.0], &IntegratorConfig::with_horizon(50.0))?;
    let cert = optimal_delta(&slope_bound_for(&energy.pair)?)?;
    let decay = verify_strict_decay(&traj, &energy.pair, &cert, None)?;
    let check = decay.wdot_crosscheck.clone().expect("analytic derivative present");
    println!(
        "Ẇ identity: max discrepancy {:.3e} (tolerance {:.3e})",
        check.max_discrepancy, check.tolerance
    );

    let v2 = evaluate_along(&traj, |y| (energy.velocity_sq)(y))?;
    let g2 = evaluate_along(&traj, |y| (energy.gradient_sq)(y))?;
    let vanish = vanishing_from_series(&v2, &g2, traj.truncated(), 1e-8)?;
    println!(
        "terminal ‖v‖² {:.3e}  ‖∇Φ‖² {:.3e}  final x = ({:.6}, {:.6})",
        vanish.terminal_n1,
        vanish.terminal_n2,
        traj.final_state()[0],
        traj.final_state()[1]
    );
    Ok(decay.passed() && vanish.vanished)
}

#[allow(dead_code)]
fn main() -> lyacert::error::Result<()> {
    run_example().map(|_| ())
}
