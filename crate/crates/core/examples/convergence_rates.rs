// Quantitative rates on DIN over ½x² with α = β = 1, where N₁ + N₂ equals
// dist² exactly (c = 1). Shows the L² bound, the subsequence windows, the
// pointwise fit and both exponential envelopes.

use lyacert::case_studies::{din_critical_set, din_energy, din_system, quad_iso, DinParams};
use lyacert::certificates::{optimal_delta, slope_bound_for, verify_strict_decay};
use lyacert::dynamics::{integrate, IntegratorConfig};
use lyacert::rates::{
    distance_series, exponential_rate, l2_distance_bound, pointwise_rate, rate_constant, subsequence_rate,
    ErrorBoundParams, QuadraticGrowthParams,
};

pub fn run_example() -> lyacert::error::Result<(bool, bool)> {
    let obj = quad_iso(1);
    let p = DinParams::new(1.0, 1.0);
    let sys = din_system(&obj, &p)?;
    let energy = din_energy(&obj, &p)?;
    let set = din_critical_set(&obj)?;

    let mut cfg = IntegratorConfig::with_horizon(30.0);
    cfg.abs_tol = 1e-30;
    let traj = integrate(&sys, &[1.0, 0.0], &cfg)?;
    let cert = optimal_delta(&slope_bound_for(&energy.pair)?)?;
    let decay = verify_strict_decay(&traj, &energy.pair, &cert, None)?;
    let dist = distance_series(&traj, &set)?;

    let eb = ErrorBoundParams::new(1.0, 10.0)?;
    let l2 = l2_distance_bound(&dist, &decay, &eb)?;
    let k = rate_constant(&decay.w_series, decay.gamma(), eb.c)?;
    let sub = subsequence_rate(&dist, k, None)?;
    let pw = pointwise_rate(&dist, Some(k))?;
    println!("∫dist² = {:.6} <= {:.6}: {}", l2.integral_dist_sq, l2.budget, l2.pass);
    println!("K = {k:.6}; windows pass: {}", sub.pass);
    println!("pointwise exponent {:?}, pass {}", pw.exponent_fit, pw.pointwise_pass);

    // W = x² + ½(v + x)² has form eigenvalues 1 ∓ √2/2.
    let mut qg = QuadraticGrowthParams::new(1.0 - 0.5f64.sqrt(), 10.0)?;
    qg.upper_m = Some(1.0 + 0.5f64.sqrt());
    qg.w_infinity = Some(0.0);
    let exp = exponential_rate(&dist, &decay.w_series, &qg, decay.gamma(), eb.c)?;
    if let Some(env) = &exp.envelope {
        println!("envelope with m: rate {:.4}, holds {}", env.rate, env.holds);
    }
    if let Some(upper) = &exp.upper_envelope {
        println!("envelope with M: rate {:.4}, holds {}", upper.rate, upper.holds);
    }
    Ok((
        l2.pass && sub.pass && pw.pointwise_pass,
        exp.upper_envelope.is_some_and(|u| u.holds),
    ))
}

#[allow(dead_code)]
fn main() -> lyacert::error::Result<()> {
    run_example().map(|_| ())
}
