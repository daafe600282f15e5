// Every example must run and reach its documented outcome.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!("../examples/", stringify!($name), ".rs"));
        }
    };
}

example!(integrate_ode);
example!(composite_certificate);
example!(din_energy);
example!(convergence_rates);
example!(semistability);
example!(primal_dual);
example!(unstable_detection);
example!(scenario_run);

use lyacert::rates::Verdict;

#[test]
fn integrate_ode_energy_balance() {
    let (drop, lost) = integrate_ode::run_example().unwrap();
    assert!((drop - lost).abs() < 1e-3 * drop);
}

#[test]
fn composite_certificate_has_no_violations() {
    let (delta, violations) = composite_certificate::run_example().unwrap();
    assert!((delta - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(violations, 0);
}

#[test]
fn din_energy_passes() {
    assert!(din_energy::run_example().unwrap());
}

#[test]
fn convergence_rates_pass_and_upper_envelope_holds() {
    assert_eq!(convergence_rates::run_example().unwrap(), (true, true));
}

#[test]
fn semistability_verdict() {
    assert_eq!(semistability::run_example().unwrap(), Verdict::Semistable);
}

#[test]
fn primal_dual_reaches_saddle() {
    let y = primal_dual::run_example().unwrap();
    for (a, b) in y.iter().zip([0.5, 0.5, -0.5]) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn unstable_detection_refuses() {
    let (violations, verdict) = unstable_detection::run_example().unwrap();
    assert!(violations > 0);
    assert_eq!(verdict, Verdict::Inconclusive);
}

#[test]
fn scenario_run_passes() {
    assert!(scenario_run::run_example().unwrap());
}
