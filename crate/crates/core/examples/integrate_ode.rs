// Integrate a damped oscillator with Dormand–Prince and post-process the
// trajectory: energy along the path, its derivative, and the dissipated
// energy by quadrature.

use lyacert::dynamics::{evaluate_along, integrate, numerical_derivative, quadrature, IntegratorConfig, SystemSpec};

pub fn run_example() -> lyacert::error::Result<(f64, f64)> {
    let c = 0.4;
    let osc = SystemSpec::new("damped_oscillator", 2, move |x, out| {
        out[0] = x[1];
        out[1] = -x[0] - c * x[1];
    });
    let traj = integrate(&osc, &[1.0, 0.0], &IntegratorConfig::with_horizon(20.0))?;

    let energy = evaluate_along(&traj, |x| 0.5 * (x[0] * x[0] + x[1] * x[1]))?;
    // dE/dt = -c v², so the dissipated energy is ∫ c v² dt.
    let rate = numerical_derivative(&energy)?;
    let dissipation = evaluate_along(&traj, |x| c * x[1] * x[1])?;
    let lost = quadrature(&dissipation)?;
    let drop = energy.first() - energy.last();

    println!("samples        {}", traj.len());
    println!("final state    {:?}", traj.final_state());
    println!("energy drop    {drop:.8}");
    println!("∫ c v² dt      {lost:.8}");
    println!("max dE/dt      {:.3e}", rate.max());
    Ok((drop, lost))
}

#[allow(dead_code)]
fn main() -> lyacert::error::Result<()> {
    run_example().map(|_| ())
}
