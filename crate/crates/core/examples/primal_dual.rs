// Primal–dual gradient flow for min ½‖x‖² subject to x₁ + x₂ = 1. Prints
// the KKT residuals along the way and the sampled constants that bound the
// admissible skew perturbation.

use lyacert::case_studies::{pd_energy, pd_perturbed_energy, pd_quad_iso_eqcon, pd_system, PdPerturbedOutcome};
use lyacert::dynamics::{integrate, IntegratorConfig};

pub fn run_example() -> lyacert::error::Result<Vec<f64>> {
    let (obj, p) = pd_quad_iso_eqcon();
    let sys = pd_system(&obj, &p)?;
    let traj = integrate(&sys, &[1.0, 0.0, 0.0], &IntegratorConfig::with_horizon(200.0))?;
    let pair = pd_energy(&obj, &p)?;
    for t in [0.0, 10.0, 50.0, 200.0] {
        let k = traj.times().partition_point(|s| *s < t).min(traj.len() - 1);
        let y = &traj.states()[k];
        println!(
            "t = {t:>5}: ‖Ax-b‖² = {:.3e}  ‖∇Φ+Aᵀλ‖² = {:.3e}",
            pair.n1(y),
            pair.n2(y)
        );
    }
    let w0 = pair.w(&[1.0, 0.0, 0.0], 1.0);
    match pd_perturbed_energy(&obj, &p, w0, 1)? {
        PdPerturbedOutcome::Certified { constants, .. } | PdPerturbedOutcome::NeedsSmallerEpsilon { constants, .. } => {
            println!(
                "estimated ‖A‖ = {:.4}, κ = {:.3}, c₀ = {:.3}, max ε = {:.3e}",
                constants.operator_norm, constants.kappa, constants.c0, constants.max_epsilon
            );
        }
    }
    Ok(traj.final_state().to_vec())
}

#[allow(dead_code)]
fn main() -> lyacert::error::Result<()> {
    run_example().map(|_| ())
}
