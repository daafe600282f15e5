// Acceptance gate: one PASS/FAIL line per criterion, written straight to
// stderr so it survives output capture. The final assertion compares every
// outcome with EXPECTED; a criterion listed there as failing is one whose
// stated form does not hold mathematically, and it must keep failing until
// that changes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use lyacert::case_studies::{
    din_critical_set, din_energy, din_system, least_squares_line, pd_energy, pd_perturbed_energy, pd_quad_iso_eqcon,
    pd_system, quad_iso, rosenbrock2, DinParams, PdPerturbedOutcome,
};
use lyacert::certificates::{
    derivative_identity_check, gamma_for, integral_estimate, optimal_delta, slope_bound_for, vanishing_from_series,
    verify_strict_decay, DecayReport, LyapunovPair, SlopeBound,
};
use lyacert::dynamics::{evaluate_along, integrate, IntegratorConfig, SystemSpec, Trajectory};
use lyacert::rates::{
    check_convergence_to_e, classify_stability, default_window_grid, distance_series, exponential_rate,
    l2_distance_bound, pointwise_rate, rate_constant, subsequence_rate, terminal_drift, CriticalSetSpec,
    ErrorBoundParams, ProbeConfig, QuadraticGrowthParams, Verdict,
};
use lyacert::scenario::{run_scenario, RunOptions};

/// `(criterion, expected to pass)`.
const EXPECTED: [(usize, bool); 12] = [
    (1, true),
    (2, true),
    (3, true),
    (4, true),
    (5, true),
    (6, true),
    (7, true),
    // The envelope rate γc/(2m) uses the lower growth constant; the
    // double-eigenvalue mode t·e^{-t} outlives e^{-1.707 t}.
    (8, false),
    (9, true),
    // The energy identity and the sign of Ẇ_ε fail on the built-in instance.
    (10, false),
    (11, true),
    (12, true),
];

struct Gate {
    outcomes: Vec<(usize, bool)>,
}

impl Gate {
    fn record(&mut self, n: usize, name: &str, pass: bool, detail: String) {
        let line = format!(
            "[{}] criterion {n:>2} {name}: {detail}\n",
            if pass { "PASS" } else { "FAIL" }
        );
        let _ = std::io::stderr().lock().write_all(line.as_bytes());
        self.outcomes.push((n, pass));
    }
}

fn at_rest(x: &[f64]) -> Vec<f64> {
    x.iter().copied().chain(x.iter().map(|_| 0.0)).collect()
}

fn criterion_1(g: &mut Gate) {
    let start = Instant::now();
    let mut ok = true;
    let mut worst = 0.0f64;
    for l in [0.0, 0.5, 1.0, 2.0, 3.0, 10.0] {
        let c = optimal_delta(&SlopeBound::exact(l)).unwrap();
        let star = 1.0 / (1.0 + l);
        ok &= c.delta == star && c.gamma == star;
        let upper = if l > 0.0 { 1.0 / l } else { 1.0 };
        for k in 1..=1000 {
            let d = upper * k as f64 / 1001.0;
            let excess = gamma_for(d, l) - c.gamma;
            worst = worst.max(excess);
            ok &= excess <= 1e-12;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1.0;
    g.record(
        1,
        "optimal constant δ* = γ* = 1/(1+L)",
        ok,
        format!("exact for 6 slopes, max γ(δ) - γ* = {worst:.1e}, {secs:.3}s"),
    );
}

fn coupled() -> (SystemSpec, LyapunovPair) {
    let sys = SystemSpec::new("coupled", 2, |x, out| {
        out[0] = -x[0];
        out[1] = -x[1] + x[0];
    });
    let pair = LyapunovPair::new(
        |x| 0.5 * x[0] * x[0],
        |x| x[0] * x[0],
        |x| 0.5 * x[1] * x[1],
        |x| 0.5 * x[1] * x[1],
        |r| 0.5 * r,
    )
    .unwrap()
    .with_derivatives(|x| -x[0] * x[0], |x| -x[1] * x[1] + x[0] * x[1]);
    (sys, pair)
}

fn criterion_2(g: &mut Gate) -> Vec<DecayReport> {
    let start = Instant::now();
    let (sys, pair) = coupled();
    let cert = optimal_delta(&slope_bound_for(&pair).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut reports = Vec::new();
    let mut violations = 0;
    for _ in 0..10 {
        // Uniform in the unit disc.
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let r = rng.random::<f64>().sqrt() / a.hypot(b);
        let traj = integrate(&sys, &[a * r, b * r], &IntegratorConfig::with_horizon(20.0)).unwrap();
        let rep = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        violations += rep.violation_times.len();
        reports.push(rep);
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = (cert.delta - 2.0 / 3.0).abs() < 1e-12 && violations == 0 && secs < 5.0;
    g.record(
        2,
        "strict decay on the coupled system",
        ok,
        format!(
            "δ* = {:.12}, {violations} violations over 10 runs, {secs:.2}s",
            cert.delta
        ),
    );
    reports
}

fn criterion_3(g: &mut Gate) -> Vec<DecayReport> {
    let start = Instant::now();
    let p = DinParams::new(1.0, 1.0);
    let mut reports = Vec::new();
    let mut ok = true;
    let mut details = Vec::new();
    // Runs start at rest so that criterion 4 can reuse them on the default
    // grid: the dissipation rate then has zero slope at t = 0.
    for (obj, x) in [(quad_iso(2), vec![1.0, -0.5]), (rosenbrock2(), vec![0.0, 0.0])] {
        let sys = din_system(&obj, &p).unwrap();
        let e = din_energy(&obj, &p).unwrap();
        let traj = integrate(&sys, &at_rest(&x), &IntegratorConfig::with_horizon(50.0)).unwrap();
        let (a, b) = (e.pair.clone(), e.pair.clone());
        let check = derivative_identity_check(&traj, &move |y: &[f64]| a.w(y, 1.0), &move |y: &[f64]| {
            -b.n1(y) - b.n2(y)
        })
        .unwrap();
        ok &= check.pass && check.tolerance == 5e-3 * (1.0 + check_max_abs_wdot(&traj, &e.pair));
        details.push(format!(
            "{} discrepancy {:.2e} <= {:.2e}",
            obj.name(),
            check.max_discrepancy,
            check.tolerance
        ));
        let cert = optimal_delta(&slope_bound_for(&e.pair).unwrap()).unwrap();
        reports.push(verify_strict_decay(&traj, &e.pair, &cert, None).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 10.0;
    g.record(
        3,
        "DIN energy identity",
        ok,
        format!("{}, {secs:.2}s", details.join("; ")),
    );
    reports
}

fn check_max_abs_wdot(traj: &Trajectory, pair: &LyapunovPair) -> f64 {
    evaluate_along(traj, |y| -pair.n1(y) - pair.n2(y)).unwrap().max_abs()
}

fn criterion_4(g: &mut Gate, runs: &[DecayReport]) {
    let mut ok = true;
    let mut counted = 0;
    let mut worst = f64::NEG_INFINITY;
    for r in runs.iter().filter(|r| r.violation_times.is_empty()) {
        let ie = integral_estimate(r).unwrap();
        ok &= ie.satisfied;
        worst = worst.max(ie.dissipation_integral / ie.budget - 1.0);
        counted += 1;
    }
    ok &= counted == runs.len();
    g.record(
        4,
        "integral budget",
        ok,
        format!("{counted} zero-violation runs, max ∫(N1+N2)/budget - 1 = {worst:.2e}"),
    );
}

fn criterion_5(g: &mut Gate) {
    let obj = quad_iso(2);
    let p = DinParams::new(1.0, 1.0);
    let e = din_energy(&obj, &p).unwrap();
    let traj = integrate(
        &din_system(&obj, &p).unwrap(),
        &[1.0, 0.0, 0.0, 1.0],
        &IntegratorConfig::with_horizon(100.0),
    )
    .unwrap();
    let v = evaluate_along(&traj, |y| (e.velocity_sq)(y)).unwrap();
    let gr = evaluate_along(&traj, |y| (e.gradient_sq)(y)).unwrap();
    let r = vanishing_from_series(&v, &gr, traj.truncated(), 1e-8).unwrap();
    g.record(
        5,
        "vanishing observables",
        r.vanished,
        format!("terminal ‖v‖² = {:.2e}, ‖∇Φ‖² = {:.2e}", r.terminal_n1, r.terminal_n2),
    );
}

fn criterion_6(g: &mut Gate) {
    let p = DinParams::new(1.0, 1.0);
    let mut ok = true;
    let mut details = Vec::new();
    for (obj, x0, horizon, thr) in [
        (quad_iso(2), vec![1.0, 0.0, 0.0, 1.0], 100.0, 1e-5),
        (rosenbrock2(), at_rest(&[-1.2, 1.0]), 500.0, 1e-3),
    ] {
        let traj = integrate(
            &din_system(&obj, &p).unwrap(),
            &x0,
            &IntegratorConfig::with_horizon(horizon),
        )
        .unwrap();
        let d = distance_series(&traj, &din_critical_set(&obj).unwrap()).unwrap();
        let c = check_convergence_to_e(&d, thr).unwrap();
        ok &= c.pass && !traj.truncated();
        details.push(format!(
            "{} terminal dist {:.2e} <= {thr:.0e}",
            obj.name(),
            c.terminal_max
        ));
    }
    g.record(6, "convergence to E", ok, details.join("; "));
}

/// Runs DIN on `½x²` in one dimension from `(1, 0)`.
fn din_quad_1d(horizon: f64) -> (DecayReport, lyacert::dynamics::TimeSeries) {
    let obj = quad_iso(1);
    let p = DinParams::new(1.0, 1.0);
    let e = din_energy(&obj, &p).unwrap();
    let mut cfg = IntegratorConfig::with_horizon(horizon);
    // Follow the decay far below the default absolute error floor.
    cfg.abs_tol = 1e-30;
    let traj = integrate(&din_system(&obj, &p).unwrap(), &[1.0, 0.0], &cfg).unwrap();
    let cert = optimal_delta(&slope_bound_for(&e.pair).unwrap()).unwrap();
    let decay = verify_strict_decay(&traj, &e.pair, &cert, None).unwrap();
    let dist = distance_series(&traj, &din_critical_set(&obj).unwrap()).unwrap();
    (decay, dist)
}

fn criterion_7(g: &mut Gate) {
    let start = Instant::now();
    let (decay, dist) = din_quad_1d(100.0);
    let eb = ErrorBoundParams::new(1.0, 10.0).unwrap();
    let l2 = l2_distance_bound(&dist, &decay, &eb).unwrap();
    let k = rate_constant(&decay.w_series, decay.gamma(), eb.c).unwrap();
    let sub = subsequence_rate(&dist, k, None).unwrap();
    let pw = pointwise_rate(&dist, Some(k)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let windows = sub.window_checks.iter().filter(|w| w.pass).count();
    let ok = l2.pass && sub.pass && sub.window_checks.len() == 6 && pw.pointwise_pass && secs < 10.0;
    g.record(
        7,
        "quantitative rates",
        ok,
        format!(
            "∫dist² = {:.6} <= {:.6}, {windows}/6 windows, exponent {:.1}, {secs:.2}s",
            l2.integral_dist_sq,
            l2.budget,
            pw.exponent_fit.unwrap_or(f64::NAN)
        ),
    );
}

fn criterion_8(g: &mut Gate) {
    let (decay, dist) = din_quad_1d(30.0);
    let m = (2.0 - 2f64.sqrt()) / 2.0;
    let mut qg = QuadraticGrowthParams::new(m, 10.0).unwrap();
    qg.w_infinity = Some(0.0);
    qg.upper_m = Some((2.0 + 2f64.sqrt()) / 2.0);
    let r = exponential_rate(&dist, &decay.w_series, &qg, decay.gamma(), 1.0).unwrap();
    let env = r.envelope.clone().unwrap();
    let upper = r.upper_envelope.clone().unwrap();
    g.record(
        8,
        "exponential envelope with m",
        r.pass,
        format!(
            "rate {:.4}, worst dist/envelope {:.2e}, growth holds {}; with M: rate {:.4}, worst ratio {:.3}",
            env.rate, env.worst_ratio, r.growth_holds, upper.rate, upper.worst_ratio
        ),
    );
}

fn criterion_9(g: &mut Gate) {
    let start = Instant::now();
    let obj = least_squares_line();
    let p = DinParams::new(1.0, 1.0);
    let sys = din_system(&obj, &p).unwrap();
    let set = din_critical_set(&obj).unwrap();
    let line = obj.argmin().unwrap();
    let x0s = vec![
        vec![2.0, 0.0, 0.0, 0.0],
        vec![0.0, -1.0, 0.0, 0.0],
        vec![1.0, 1.0, 0.5, -0.5],
        vec![-1.0, 0.5, 0.3, 0.0],
    ];
    let integ = IntegratorConfig::with_horizon(100.0);
    let minimizers: Vec<Vec<f64>> = (0..5).map(|k| line.sample(k).unwrap()).collect();
    let mut ok = true;
    let mut limits: Vec<Vec<f64>> = Vec::new();
    let mut worst_drift = 0.0f64;
    let mut worst_line = 0.0f64;
    let mut worst_osc = 0.0f64;
    for x0 in &x0s {
        let traj = integrate(&sys, x0, &integ).unwrap();
        let drift = terminal_drift(&traj).unwrap();
        let xf = &traj.final_state()[..2];
        let off_line = set.distance(traj.final_state());
        worst_drift = worst_drift.max(drift);
        worst_line = worst_line.max(off_line);
        let tail = traj.times().partition_point(|t| *t < 0.25 * integ.t_end);
        for z in &minimizers {
            let d: Vec<f64> = traj.states()[tail..]
                .iter()
                .map(|y| ((y[0] - z[0]).powi(2) + (y[1] - z[1]).powi(2)).sqrt())
                .collect();
            let osc =
                d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min);
            worst_osc = worst_osc.max(osc);
        }
        limits.push(xf.to_vec());
    }
    ok &= worst_drift <= 1e-5 && worst_line <= 1e-5 && worst_osc <= 1e-4;
    let distinct = limits
        .iter()
        .enumerate()
        .any(|(i, a)| limits[i + 1..].iter().any(|b| (a[0] - b[0]).hypot(a[1] - b[1]) > 1e-3));
    ok &= distinct;
    let probe = ProbeConfig {
        initial_states: x0s.clone(),
        ..ProbeConfig::default()
    };
    let v = classify_stability(&sys, &set, &probe, &integ, true).unwrap();
    ok &= v.verdict == Verdict::Semistable;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    g.record(
        9,
        "semistability on a line of minimizers",
        ok,
        format!(
            "drift {worst_drift:.1e}, off-line {worst_line:.1e}, tail oscillation {worst_osc:.1e}, distinct limits {distinct}, verdict {}, {secs:.2}s",
            v.verdict
        ),
    );
}

fn criterion_10(g: &mut Gate) {
    let (obj, p) = pd_quad_iso_eqcon();
    let sys = pd_system(&obj, &p).unwrap();
    let x0 = [1.0, 0.0, 0.0];
    let traj = integrate(&sys, &x0, &IntegratorConfig::with_horizon(200.0)).unwrap();
    let y = traj.final_state();
    let pair = pd_energy(&obj, &p).unwrap();
    let feas = pair.n1(y).sqrt();
    let stat = pair.n2(y).sqrt();
    let saddle = [0.5, 0.5, -0.5];
    let err = y.iter().zip(saddle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let kkt = feas <= 1e-6 && stat <= 1e-6 && err <= 1e-4;

    let (a, b) = (pair.clone(), pair.clone());
    let identity = derivative_identity_check(&traj, &move |y: &[f64]| a.w(y, 1.0), &move |y: &[f64]| {
        -b.n1(y) - b.n2(y)
    })
    .unwrap();

    // ε at the emitted smallness bound for the sublevel set of x0.
    let w0 = pair.w(&x0, 1.0);
    let probe = {
        let mut q = p.clone();
        q.epsilon = 1e-12;
        q
    };
    let max_eps = match pd_perturbed_energy(&obj, &probe, w0, 10).unwrap() {
        PdPerturbedOutcome::Certified { constants, .. } => constants.max_epsilon,
        PdPerturbedOutcome::NeedsSmallerEpsilon { constants, .. } => constants.max_epsilon,
    };
    let mut pe = p.clone();
    pe.epsilon = max_eps;
    let worst_wdot_eps = match pd_perturbed_energy(&obj, &pe, w0, 10).unwrap() {
        PdPerturbedOutcome::Certified { pair, .. } => traj
            .states()
            .iter()
            .filter(|y| y.iter().zip(saddle).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() > 1e-6)
            .map(|y| pair.wdot(y, 1.0).unwrap())
            .fold(f64::NEG_INFINITY, f64::max),
        PdPerturbedOutcome::NeedsSmallerEpsilon { .. } => f64::INFINITY,
    };
    let ok = kkt && identity.pass && worst_wdot_eps < 0.0;
    g.record(
        10,
        "primal-dual KKT convergence",
        ok,
        format!(
            "‖Ax-b‖ = {feas:.1e}, ‖∇Φ+Aᵀλ‖ = {stat:.1e}, saddle error {err:.1e} ({}); identity discrepancy {:.3} vs tol {:.3}; ε = {max_eps:.2e}, max Ẇ_ε = {worst_wdot_eps:+.3}",
            if kkt { "ok" } else { "off" },
            identity.max_discrepancy,
            identity.tolerance
        ),
    );
}

fn criterion_11(g: &mut Gate) {
    let sys = SystemSpec::new("growth", 1, |x, out| out[0] = x[0]);
    let pair = LyapunovPair::single(|x| 0.5 * x[0] * x[0], |x| x[0] * x[0], |_| 0.0).with_wdot(|x| x[0] * x[0]);
    let cert = optimal_delta(&slope_bound_for(&pair).unwrap()).unwrap();
    let integ = IntegratorConfig::with_horizon(5.0);
    let traj = integrate(&sys, &[0.1], &integ).unwrap();
    let decay = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
    let windows = default_window_grid(integ.t_end);
    let covered = windows
        .iter()
        .filter(|t| decay.violation_times.iter().any(|v| *v >= **t && *v <= 2.0 * **t))
        .count();
    let v = classify_stability(
        &sys,
        &CriticalSetSpec::point(vec![0.0]).unwrap(),
        &ProbeConfig::default(),
        &integ,
        true,
    )
    .unwrap();
    let ok =
        covered == windows.len() && !decay.passed() && v.verdict == Verdict::Inconclusive && !v.failing_rows.is_empty();
    g.record(
        11,
        "failure detection on ẋ = x",
        ok,
        format!(
            "violations in {covered}/{} windows, verdict {} with {} failing rows",
            windows.len(),
            v.verdict,
            v.failing_rows.len()
        ),
    );
}

fn criterion_12(g: &mut Gate) {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut names: Vec<_> = std::fs::read_dir(&scenarios)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    names.sort();
    let strip = |s: String| {
        s.lines()
            .filter(|l| !l.contains("\"wall_time\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut identical = 0;
    for path in &names {
        let out = dir.path().join(path.file_stem().unwrap());
        let opts = RunOptions {
            output_dir: Some(out.clone()),
            ..Default::default()
        };
        let mut texts = Vec::new();
        for _ in 0..2 {
            run_scenario(path, &opts).unwrap();
            texts.push(strip(std::fs::read_to_string(out.join("report.json")).unwrap()));
        }
        identical += usize::from(texts[0] == texts[1]);
    }
    g.record(
        12,
        "reproducible reports",
        identical == names.len() && !names.is_empty(),
        format!(
            "{identical}/{} bundled scenarios byte-identical modulo wall_time",
            names.len()
        ),
    );
}

#[test]
fn acceptance() {
    let mut g = Gate { outcomes: Vec::new() };
    // libtest has already written "test acceptance ... " on this line.
    let _ = std::io::stderr().lock().write_all(b"\n");
    criterion_1(&mut g);
    let mut runs = criterion_2(&mut g);
    runs.extend(criterion_3(&mut g));
    criterion_4(&mut g, &runs);
    criterion_5(&mut g);
    criterion_6(&mut g);
    criterion_7(&mut g);
    criterion_8(&mut g);
    criterion_9(&mut g);
    criterion_10(&mut g);
    criterion_11(&mut g);
    criterion_12(&mut g);
    let passed = g.outcomes.iter().filter(|(_, p)| *p).count();
    let _ = writeln!(std::io::stderr().lock(), "acceptance: {passed}/12 criteria pass");
    assert_eq!(
        g.outcomes,
        EXPECTED.to_vec(),
        "acceptance outcomes differ from the recorded expectation"
    );
}
