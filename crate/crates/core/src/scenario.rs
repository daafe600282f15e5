//! Declarative scenarios: parse a TOML file, run simulate → certify → rate
//! → classify, and write `report.json` plus per-trajectory CSV files.
//!
//! Exit codes: 0 when every enabled check passes, 1 on a failed check,
//! 2 on a validation error, 3 on a runtime or I/O error.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::case_studies::{
    builtin_objective, din_critical_set, din_energy, din_perturbed_energy, din_system, pd_critical_set, pd_energy,
    pd_perturbed_energy, pd_quad_iso_eqcon, pd_system, DinParams, PdConstants, PdPerturbedOutcome, BUILTIN_OBJECTIVES,
    BUILTIN_SYSTEMS, DEFAULT_ETAS,
};
use crate::certificates::{
    integral_estimate, make_certificate, optimal_delta, slope_bound_for, vanishing_from_series, verify_strict_decay,
    CompositeCertificate, CrossCheck, DecayReport, IntegralReport, LyapunovPair, ScalarFn, VanishingReport, WdotSource,
};
use crate::dynamics::{evaluate_along, integrate, IntegratorConfig, SystemSpec, TimeSeries, Trajectory};
use crate::rates::{
    check_convergence_to_e, classify_stability, distance_series, exponential_rate, l2_distance_bound,
    pointwise_rate_with, rate_constant, subsequence_rate, ConvergenceCheck, CriticalSetSpec, ErrorBoundParams,
    ExponentialReport, L2Report, PointwiseConfig, PointwiseReport, ProbeConfig, QuadraticGrowthParams,
    StabilityVerdict, SubsequenceReport, DEFAULT_PROBE_SEED,
};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "LYACERT_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub system: SystemConfig,
    #[serde(default)]
    pub x0: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub pair: PairConfig,
    #[serde(default)]
    pub delta: DeltaPolicy,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_bound: Option<ErrorBoundParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_growth: Option<QuadraticGrowthParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointwise: Option<PointwiseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critical_set: Option<CriticalSetConfig>,
    #[serde(default = "yes")]
    pub e_is_equilibrium_set: bool,
}

fn yes() -> bool {
    true
}

/// A built-in id such as `din:quad_iso`, or an inline linear system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemConfig {
    Builtin(String),
    Inline(InlineSystem),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineSystem {
    pub linear: LinearSystem,
}

/// `ẋ = M x + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystem {
    pub matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
}

/// `"energy"`, `"perturbed"`, or an inline quadratic pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairConfig {
    Named(String),
    Inline(InlinePair),
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig::Named("energy".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlinePair {
    pub quadratic: QuadraticPair,
}

/// `V_i = ½ xᵀ v_i x`, `N_i = xᵀ n_i x`, `h(r) = h_slope · r`. Without `v2`
/// the pair is single-function with `W = V1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticPair {
    pub v1: Vec<Vec<f64>>,
    pub n1: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v2: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n2: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub h_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared_slope: Option<f64>,
}

/// `"optimal"` or `{ explicit = δ }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaPolicy {
    Named(String),
    Explicit { explicit: f64 },
}

impl Default for DeltaPolicy {
    fn default() -> Self {
        DeltaPolicy::Named("optimal".into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub etas: Option<[f64; 3]>,
    /// Sublevel value for the primal–dual constant estimation; defaults to
    /// the largest `W(x0)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    pub decay: bool,
    pub integral: bool,
    pub vanishing: bool,
    pub distance: bool,
    pub l2: bool,
    pub subsequence: bool,
    pub pointwise: bool,
    pub exponential: bool,
    pub classify: bool,
}

impl Checks {
    fn needs_critical_set(&self) -> bool {
        self.distance || self.l2 || self.subsequence || self.pointwise || self.exponential || self.classify
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub vanishing: f64,
    pub distance: f64,
    /// Decay tolerance; defaults to `1e-6 (1 + max|W|)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_tol: Option<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            vanishing: 1e-8,
            distance: 1e-5,
            decay_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriticalSetConfig {
    Point {
        point: Vec<f64>,
    },
    Affine {
        base: Vec<f64>,
        #[serde(default)]
        directions: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sampler_spacing: Option<f64>,
    },
}

impl CriticalSetConfig {
    fn build(&self) -> crate::error::Result<CriticalSetSpec> {
        match self {
            CriticalSetConfig::Point { point } => CriticalSetSpec::point(point.clone()),
            CriticalSetConfig::Affine {
                base,
                directions,
                sampler_spacing,
            } => {
                let s = CriticalSetSpec::affine(base.clone(), directions.clone())?;
                match sampler_spacing {
                    Some(h) => s.with_grid_sampler(*h),
                    None => Ok(s),
                }
            }
        }
    }
}

/// Overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub dense_dt: Option<f64>,
}

#[derive(Debug)]
pub enum RunError {
    Validation(Vec<String>),
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => EXIT_VALIDATION,
            RunError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Validation(d) => write!(f, "scenario is invalid:\n  {}", d.join("\n  ")),
            RunError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub delta: f64,
    pub gamma: f64,
    pub tolerance: f64,
    pub max_violation: f64,
    pub violation_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_violation_time: Option<f64>,
    pub wdot_source: WdotSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wdot_crosscheck: Option<CrossCheck>,
    pub truncated: bool,
    pub pass: bool,
}

impl DecaySummary {
    fn of(r: &DecayReport) -> Self {
        DecaySummary {
            delta: r.certificate.delta,
            gamma: r.certificate.gamma,
            tolerance: r.tolerance,
            max_violation: r.max_violation,
            violation_count: r.violation_times.len(),
            first_violation_time: r.violation_times.first().copied(),
            wdot_source: r.wdot_source,
            wdot_crosscheck: r.wdot_crosscheck.clone(),
            truncated: r.truncated,
            pass: r.passed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub index: usize,
    pub x0: Vec<f64>,
    pub samples: usize,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecaySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integral: Option<IntegralReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vanishing: Option<VanishingReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<ConvergenceCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<L2Report>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsequence: Option<SubsequenceReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointwise: Option<PointwiseReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponential: Option<ExponentialReport>,
    pub failed_checks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationInfo {
    Din {
        epsilon: f64,
        c_epsilon: f64,
        anchors: Vec<Vec<f64>>,
    },
    PrimalDual {
        epsilon: f64,
        c1: f64,
        c2: f64,
        /// Sampled estimates, not proven constants.
        constants: PdConstants,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub scenario: Scenario,
    pub certificate: CompositeCertificate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PerturbationInfo>,
    pub trajectories: Vec<TrajectoryReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityVerdict>,
    pub overall_pass: bool,
    pub wall_time: f64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub output_dir: PathBuf,
    pub exit_code: i32,
}

/// Everything a run needs, built and cross-checked before integrating.
struct Prepared {
    scenario: Scenario,
    system: SystemSpec,
    pairs: Vec<LyapunovPair>,
    raw_observables: Option<(ScalarFn, ScalarFn)>,
    certificate: CompositeCertificate,
    critical_set: Option<CriticalSetSpec>,
    perturbation: Option<PerturbationInfo>,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, RunError> {
    toml::from_str(text).map_err(|e| RunError::Validation(vec![format!("parse: {e}")]))
}

pub fn load_scenario(path: &Path) -> Result<Scenario, RunError> {
    let text = fs::read_to_string(path)
        .map_err(|e| RunError::Runtime(format!("cannot read scenario {}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// Schema and cross-field diagnostics; empty means valid. Only an
/// unreadable file is an error.
pub fn validate_scenario(path: &Path) -> std::io::Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(match parse_scenario(&text) {
        Err(RunError::Validation(d)) => d,
        Err(RunError::Runtime(m)) => vec![m],
        Ok(s) => match prepare(s) {
            Ok(_) => Vec::new(),
            Err(d) => d,
        },
    })
}

pub fn validate_scenario_value(scenario: &Scenario) -> Vec<String> {
    prepare(scenario.clone()).err().unwrap_or_default()
}

fn matrix_ok(m: &[Vec<f64>], n: usize) -> bool {
    m.len() == n && m.iter().all(|r| r.len() == n && r.iter().all(|v| v.is_finite()))
}

fn quad_form(m: &[Vec<f64>], x: &[f64]) -> f64 {
    m.iter()
        .zip(x)
        .map(|(row, xi)| xi * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// `d/dt ½xᵀPx = ½ xᵀ(P + Pᵀ) f(x)`.
fn quad_form_rate(p: &[Vec<f64>], x: &[f64], f: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += 0.5 * (p[i][j] + p[j][i]) * x[j] * f[i];
        }
    }
    s
}

fn quadratic_pair(q: &QuadraticPair, system: &SystemSpec) -> crate::error::Result<LyapunovPair> {
    let (v1, n1) = (q.v1.clone(), q.n1.clone());
    let n2 = q.n2.clone();
    let sys1 = system.clone();
    let v1c = v1.clone();
    let v1dot = move |x: &[f64]| quad_form_rate(&v1c, x, &sys1.eval(x));
    let n2f = move |x: &[f64]| n2.as_ref().map_or(0.0, |m| quad_form(m, x));
    match &q.v2 {
        None => Ok(
            LyapunovPair::single(move |x| 0.5 * quad_form(&v1, x), move |x| quad_form(&n1, x), n2f).with_wdot(v1dot),
        ),
        Some(v2) => {
            let v2 = v2.clone();
            let v2c = v2.clone();
            let sys2 = system.clone();
            let h = q.h_slope;
            let pair = LyapunovPair::new(
                move |x| 0.5 * quad_form(&v1, x),
                move |x| quad_form(&n1, x),
                move |x| 0.5 * quad_form(&v2, x),
                n2f,
                move |r| h * r,
            )?
            .with_derivatives(v1dot, move |x| quad_form_rate(&v2c, x, &sys2.eval(x)));
            Ok(match q.declared_slope {
                Some(l) => pair.with_declared_slope(l),
                None => pair,
            })
        }
    }
}

enum Family {
    Din(crate::case_studies::ObjectiveSpec, DinParams),
    Pd(
        crate::case_studies::ObjectiveSpec,
        crate::case_studies::PrimalDualParams,
    ),
    Linear,
}

fn prepare(mut s: Scenario) -> Result<Prepared, Vec<String>> {
    let mut d: Vec<String> = Vec::new();
    macro_rules! bail {
        () => {
            return Err(d)
        };
    }
    if s.name.trim().is_empty() {
        d.push("name: must not be empty".into());
    }
    if s.x0.is_empty() {
        d.push("x0: at least one initial state is required".into());
    }
    if let Err(e) = s.integrator.validate() {
        d.push(format!("integrator: {e}"));
    }
    if !(s.thresholds.vanishing > 0.0) {
        d.push("thresholds.vanishing: must be positive".into());
    }
    if !(s.thresholds.distance > 0.0) {
        d.push("thresholds.distance: must be positive".into());
    }
    if let Some(t) = s.thresholds.decay_tol {
        if !(t > 0.0) {
            d.push("thresholds.decay_tol: must be positive".into());
        }
    }
    if let Some(eb) = &s.error_bound {
        if let Err(e) = eb.validate() {
            d.push(format!("error_bound: {e}"));
        }
    }
    if let Some(q) = &s.quadratic_growth {
        if let Err(e) = q.validate() {
            d.push(format!("quadratic_growth: {e}"));
        }
    }
    if let Some(p) = &mut s.probe {
        if let Some(seed) = s.seed {
            p.seed = seed;
        }
        if let Err(e) = p.validate() {
            d.push(format!("probe: {e}"));
        }
    }
    if let Some(pw) = &s.pointwise {
        if !(pw.tail_start_fraction >= 0.0 && pw.tail_start_fraction < 1.0) {
            d.push("pointwise.tail_start_fraction: must lie in [0, 1)".into());
        }
    }
    let c = &s.checks;
    if (c.l2 || c.subsequence || c.exponential) && s.error_bound.is_none() {
        d.push("error_bound: required by checks.l2, checks.subsequence or checks.exponential".into());
    }
    if c.exponential && s.quadratic_growth.is_none() {
        d.push("quadratic_growth: required by checks.exponential".into());
    }
    if s.x0.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        d.push("x0: entries must be finite".into());
    }
    if !d.is_empty() {
        bail!();
    }

    let dim = s.x0[0].len();
    let family = match &s.system {
        SystemConfig::Builtin(id) => match id.split_once(':') {
            Some(("din", obj)) => {
                if !dim.is_multiple_of(2) || dim == 0 {
                    d.push(format!("x0[0]: DIN states are (x, v) pairs, got odd length {dim}"));
                    bail!();
                }
                let obj = match builtin_objective(obj, dim / 2) {
                    Ok(o) => o,
                    Err(e) => {
                        d.push(format!("system: {e}"));
                        bail!();
                    }
                };
                let p = DinParams {
                    alpha: s.params.alpha.unwrap_or(1.0),
                    beta: s.params.beta.unwrap_or(1.0),
                    epsilon: s.params.epsilon.unwrap_or(0.0),
                    anchor: s.params.anchor.clone(),
                };
                if let Err(e) = p.validate() {
                    d.push(format!("params: {e}"));
                    bail!();
                }
                Family::Din(obj, p)
            }
            Some(("pd", "quad_iso_eqcon")) => {
                let (obj, mut p) = pd_quad_iso_eqcon();
                p.epsilon = s.params.epsilon.unwrap_or(0.0);
                p.etas = s.params.etas.unwrap_or(DEFAULT_ETAS);
                if let Err(e) = p.validate(&obj) {
                    d.push(format!("params: {e}"));
                    bail!();
                }
                Family::Pd(obj, p)
            }
            _ => {
                d.push(format!(
                    "system: unknown built-in '{id}', expected one of {}",
                    BUILTIN_SYSTEMS.join(", ")
                ));
                bail!();
            }
        },
        SystemConfig::Inline(inline) => {
            let n = inline.linear.matrix.len();
            if n == 0 || !matrix_ok(&inline.linear.matrix, n) {
                d.push("system.linear.matrix: must be a nonempty square matrix of finite numbers".into());
            }
            if let Some(o) = &inline.linear.offset {
                if o.len() != n {
                    d.push(format!("system.linear.offset: length {}, expected {n}", o.len()));
                }
            }
            if !d.is_empty() {
                bail!();
            }
            Family::Linear
        }
    };

    let system = match &family {
        Family::Din(obj, p) => din_system(obj, p).expect("validated"),
        Family::Pd(obj, p) => pd_system(obj, p).expect("validated"),
        Family::Linear => {
            let SystemConfig::Inline(inline) = &s.system else {
                unreachable!()
            };
            let m = inline.linear.matrix.clone();
            let n = m.len();
            let off = inline.linear.offset.clone().unwrap_or_else(|| vec![0.0; n]);
            SystemSpec::new("linear", n, move |x, out| {
                for i in 0..n {
                    out[i] = off[i] + m[i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            })
        }
    };
    let n = system.dimension();
    for (k, x) in s.x0.iter().enumerate() {
        if x.len() != n {
            d.push(format!("x0[{k}]: length {}, system dimension {n}", x.len()));
        }
    }
    if !d.is_empty() {
        bail!();
    }

    let named = match &s.pair {
        PairConfig::Named(name) => Some(name.as_str()),
        PairConfig::Inline(_) => None,
    };
    let mut raw_observables: Option<(ScalarFn, ScalarFn)> = None;
    let mut perturbation = None;
    let pairs: Vec<LyapunovPair> = match (&family, named) {
        (_, Some(other)) if other != "energy" && other != "perturbed" => {
            d.push(format!(
                "pair: unknown pair '{other}', expected \"energy\", \"perturbed\" or a [pair.quadratic] table"
            ));
            bail!();
        }
        (Family::Linear, Some(_)) => {
            d.push("pair: inline systems need an inline [pair.quadratic] table".into());
            bail!();
        }
        (_, None) => {
            let PairConfig::Inline(ip) = &s.pair else {
                unreachable!()
            };
            let q = &ip.quadratic;
            let mut ok = matrix_ok(&q.v1, n) && matrix_ok(&q.n1, n);
            ok &= q.v2.as_ref().is_none_or(|m| matrix_ok(m, n));
            ok &= q.n2.as_ref().is_none_or(|m| matrix_ok(m, n));
            if !ok {
                d.push(format!(
                    "pair.quadratic: every matrix must be {n}x{n} with finite entries"
                ));
            }
            if !(q.h_slope >= 0.0) {
                d.push("pair.quadratic.h_slope: must be nonnegative".into());
            }
            if q.v2.is_none() && q.h_slope != 0.0 {
                d.push("pair.quadratic.h_slope: only meaningful together with v2".into());
            }
            if !d.is_empty() {
                bail!();
            }
            match quadratic_pair(q, &system) {
                Ok(p) => vec![p; s.x0.len()],
                Err(e) => {
                    d.push(format!("pair.quadratic: {e}"));
                    bail!();
                }
            }
        }
        (Family::Din(obj, p), Some("energy")) => {
            let e = din_energy(obj, p).expect("validated");
            raw_observables = Some((e.velocity_sq.clone(), e.gradient_sq.clone()));
            vec![e.pair; s.x0.len()]
        }
        (Family::Din(obj, p), Some(_)) => {
            let e = din_energy(obj, p).expect("validated");
            raw_observables = Some((e.velocity_sq, e.gradient_sq));
            let mut pairs = Vec::new();
            let mut anchors = Vec::new();
            for (k, x0) in s.x0.iter().enumerate() {
                match din_perturbed_energy(obj, p, Some(x0)) {
                    Ok(pert) => {
                        anchors.push(pert.anchor.clone());
                        pairs.push(pert.pair);
                    }
                    Err(e) => d.push(format!("params (x0[{k}]): {e}")),
                }
            }
            if !d.is_empty() {
                bail!();
            }
            perturbation = Some(PerturbationInfo::Din {
                epsilon: p.epsilon,
                c_epsilon: p.c_epsilon(),
                anchors,
            });
            pairs
        }
        (Family::Pd(obj, p), Some(which)) => {
            let base = pd_energy(obj, p).expect("validated");
            let (b1, b2) = (base.clone(), base.clone());
            raw_observables = Some((Arc::new(move |y: &[f64]| b1.n1(y)), Arc::new(move |y: &[f64]| b2.n2(y))));
            if which == "energy" {
                vec![base; s.x0.len()]
            } else {
                let w0 = s
                    .params
                    .w0
                    .unwrap_or_else(|| s.x0.iter().map(|x| base.w(x, 1.0)).fold(f64::NEG_INFINITY, f64::max));
                let seed = s.seed.unwrap_or(DEFAULT_PROBE_SEED);
                match pd_perturbed_energy(obj, p, w0, seed) {
                    Ok(PdPerturbedOutcome::Certified {
                        pair,
                        c1,
                        c2,
                        constants,
                    }) => {
                        perturbation = Some(PerturbationInfo::PrimalDual {
                            epsilon: p.epsilon,
                            c1,
                            c2,
                            constants,
                        });
                        vec![pair; s.x0.len()]
                    }
                    Ok(PdPerturbedOutcome::NeedsSmallerEpsilon { epsilon, constants }) => {
                        d.push(format!(
                            "params.epsilon: ε = {epsilon} violates ε c₀ κ <= ½ min{{a₁, a₂}}; estimated maximum is {}",
                            constants.max_epsilon
                        ));
                        bail!();
                    }
                    Err(e) => {
                        d.push(format!("params: {e}"));
                        bail!();
                    }
                }
            }
        }
    };

    let slope = match slope_bound_for(&pairs[0]) {
        Ok(sb) => sb,
        Err(e) => {
            d.push(format!("pair: {e}"));
            bail!();
        }
    };
    let certificate = match &s.delta {
        DeltaPolicy::Named(n) if n == "optimal" => optimal_delta(&slope),
        DeltaPolicy::Named(other) => {
            d.push(format!(
                "delta: unknown policy '{other}', expected \"optimal\" or {{ explicit = value }}"
            ));
            bail!();
        }
        DeltaPolicy::Explicit { explicit } => make_certificate(&slope, *explicit),
    };
    let certificate = match certificate {
        Ok(c) => c,
        Err(e) => {
            let field = if matches!(s.delta, DeltaPolicy::Explicit { .. }) {
                "delta.explicit"
            } else {
                "delta"
            };
            d.push(format!("{field}: {e}"));
            bail!();
        }
    };

    let critical_set = match (&s.critical_set, &family) {
        (Some(cfg), _) => match cfg.build() {
            Ok(set) => Some(set),
            Err(e) => {
                d.push(format!("critical_set: {e}"));
                bail!();
            }
        },
        (None, Family::Din(obj, _)) => din_critical_set(obj).ok(),
        (None, Family::Pd(_, p)) => pd_critical_set(p).ok(),
        (None, Family::Linear) => None,
    };
    if s.checks.needs_critical_set() {
        match &critical_set {
            None => d.push("critical_set: required by the distance, rate and classify checks".into()),
            Some(set) if set.dimension() != n => d.push(format!(
                "critical_set: dimension {}, system dimension {n}",
                set.dimension()
            )),
            Some(set) if s.checks.classify && !set.has_sampler() => {
                d.push("critical_set.sampler_spacing: classify needs a sampler on non-point sets".into())
            }
            _ => {}
        }
    }
    if !d.is_empty() {
        bail!();
    }

    Ok(Prepared {
        scenario: s,
        system,
        pairs,
        raw_observables,
        certificate,
        critical_set,
        perturbation,
    })
}

fn apply_options(s: &mut Scenario, opts: &RunOptions) {
    if let Some(seed) = opts.seed {
        s.seed = Some(seed);
    }
    if let Some(dt) = opts.dense_dt {
        s.integrator.dense_output_dt = Some(dt);
    }
    if let Some(dir) = &opts.output_dir {
        s.output_dir = Some(dir.to_string_lossy().into_owned());
    }
}

/// Runs `f` on a pool capped by `LYACERT_THREADS` when it is set.
fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
                RunError::Validation(vec![format!("{THREADS_ENV}: expected a positive integer, got '{v}'")])
            })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| RunError::Runtime(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let scenario = load_scenario(path)?;
    run_scenario_value(scenario, opts)
}

struct Computed {
    traj: Trajectory,
    report: TrajectoryReport,
    decay: Option<DecayReport>,
    dist: Option<TimeSeries>,
}

/// Runs an already parsed scenario and writes its artifacts.
pub fn run_scenario_value(mut scenario: Scenario, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let start = Instant::now();
    apply_options(&mut scenario, opts);
    let prepared = prepare(scenario).map_err(RunError::Validation)?;
    let s = &prepared.scenario;

    let computed: Vec<Computed> = with_thread_cap(|| {
        s.x0.par_iter()
            .enumerate()
            .map(|(k, x0)| run_trajectory(&prepared, k, x0))
            .collect::<Result<Vec<_>, RunError>>()
    })??;

    let stability = if s.checks.classify {
        let set = prepared.critical_set.as_ref().expect("validated");
        let mut probe = s.probe.clone().unwrap_or_default();
        if let Some(seed) = s.seed {
            probe.seed = seed;
        }
        if probe.initial_states.is_empty() {
            probe.initial_states = s.x0.clone();
        }
        let v = with_thread_cap(|| {
            classify_stability(&prepared.system, set, &probe, &s.integrator, s.e_is_equilibrium_set)
        })?
        .map_err(|e| RunError::Runtime(format!("classify: {e}")))?;
        Some(v)
    } else {
        None
    };

    let overall_pass = computed.iter().all(|c| c.report.failed_checks.is_empty())
        && stability.as_ref().is_none_or(|v| v.failing_rows.is_empty());
    let output_dir = PathBuf::from(
        s.output_dir
            .clone()
            .unwrap_or_else(|| format!("lyacert-out/{}", s.name)),
    );
    let report = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: s.clone(),
        certificate: prepared.certificate.clone(),
        perturbation: prepared.perturbation.clone(),
        trajectories: computed.iter().map(|c| c.report.clone()).collect(),
        stability,
        overall_pass,
        wall_time: start.elapsed().as_secs_f64(),
    };
    write_artifacts(&output_dir, &report, &computed).map_err(|e| RunError::Runtime(format!("output_dir: {e}")))?;
    Ok(RunOutcome {
        exit_code: if overall_pass { EXIT_PASS } else { EXIT_CHECK_FAILED },
        report,
        output_dir,
    })
}

fn run_trajectory(p: &Prepared, k: usize, x0: &[f64]) -> Result<Computed, RunError> {
    let s = &p.scenario;
    let c = &s.checks;
    let rt = |what: &str, e: crate::error::Error| RunError::Runtime(format!("x0[{k}] {what}: {e}"));
    let traj = integrate(&p.system, x0, &s.integrator).map_err(|e| rt("integrate", e))?;
    let pair = &p.pairs[k];
    let mut failed = Vec::new();

    let decay = verify_strict_decay(&traj, pair, &p.certificate, s.thresholds.decay_tol).map_err(|e| rt("decay", e))?;
    let decay_summary = DecaySummary::of(&decay);
    if c.decay && !decay_summary.pass {
        failed.push("decay".to_string());
    }

    let integral = if c.integral {
        let r = integral_estimate(&decay).map_err(|e| rt("integral", e))?;
        if !r.satisfied {
            failed.push("integral".into());
        }
        Some(r)
    } else {
        None
    };

    let vanishing = if c.vanishing {
        let (n1, n2) = match &p.raw_observables {
            Some((a, b)) => (
                evaluate_along(&traj, |x| a(x)).map_err(|e| rt("vanishing", e))?,
                evaluate_along(&traj, |x| b(x)).map_err(|e| rt("vanishing", e))?,
            ),
            None => (decay.n1_series.clone(), decay.n2_series.clone()),
        };
        let r = vanishing_from_series(&n1, &n2, traj.truncated(), s.thresholds.vanishing)
            .map_err(|e| rt("vanishing", e))?;
        if !r.vanished {
            failed.push("vanishing".into());
        }
        Some(r)
    } else {
        None
    };

    let dist = match &p.critical_set {
        Some(set) if c.needs_critical_set() => Some(distance_series(&traj, set).map_err(|e| rt("distance", e))?),
        _ => None,
    };

    let distance = if c.distance {
        let r = check_convergence_to_e(dist.as_ref().unwrap(), s.thresholds.distance).map_err(|e| rt("distance", e))?;
        if !r.pass {
            failed.push("distance".into());
        }
        Some(r)
    } else {
        None
    };

    let eb = s.error_bound.as_ref();
    let l2 = if c.l2 {
        let r = l2_distance_bound(dist.as_ref().unwrap(), &decay, eb.unwrap()).map_err(|e| rt("l2", e))?;
        if !r.pass {
            failed.push("l2".into());
        }
        Some(r)
    } else {
        None
    };

    let k_const = match eb {
        Some(eb) => Some(rate_constant(&decay.w_series, decay.gamma(), eb.c).map_err(|e| rt("rate constant", e))?),
        None => None,
    };
    let subsequence = if c.subsequence {
        let r = subsequence_rate(dist.as_ref().unwrap(), k_const.unwrap(), None).map_err(|e| rt("subsequence", e))?;
        if !r.pass {
            failed.push("subsequence".into());
        }
        Some(r)
    } else {
        None
    };

    let pointwise = if c.pointwise {
        let cfg = s.pointwise.unwrap_or_default();
        let r = pointwise_rate_with(dist.as_ref().unwrap(), k_const, &cfg).map_err(|e| rt("pointwise", e))?;
        if !r.pointwise_pass {
            failed.push("pointwise".into());
        }
        Some(r)
    } else {
        None
    };

    let exponential = if c.exponential {
        let qg = s.quadratic_growth.as_ref().unwrap();
        let r = exponential_rate(
            dist.as_ref().unwrap(),
            &decay.w_series,
            qg,
            decay.gamma(),
            eb.unwrap().c,
        )
        .map_err(|e| rt("exponential", e))?;
        if !r.pass {
            failed.push("exponential".into());
        }
        Some(r)
    } else {
        None
    };

    let report = TrajectoryReport {
        index: k,
        x0: x0.to_vec(),
        samples: traj.len(),
        final_time: traj.final_time(),
        final_state: traj.final_state().to_vec(),
        truncated: traj.truncated(),
        decay: Some(decay_summary),
        integral,
        vanishing,
        distance,
        l2,
        subsequence,
        pointwise,
        exponential,
        failed_checks: failed,
    };
    Ok(Computed {
        traj,
        report,
        decay: Some(decay),
        dist,
    })
}

/// 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_artifacts(dir: &Path, report: &RunReport, computed: &[Computed]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
    fs::write(dir.join("report.json"), json + "\n")?;
    for c in computed {
        let k = c.report.index;
        write_trajectory_csv(&dir.join(format!("trajectory_{k}.csv")), &c.traj)?;
        if let Some(decay) = &c.decay {
            write_decay_csv(&dir.join(format!("decay_{k}.csv")), decay, c.dist.as_ref())?;
        }
        if let Some(sub) = &c.report.subsequence {
            write_window_csv(&dir.join(format!("window_checks_{k}.csv")), sub)?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

/// Columns `t, x0, x1, ...`.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..traj.dimension()).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for (t, x) in traj.times().iter().zip(traj.states()) {
        let mut row = vec![fmt_float(*t)];
        row.extend(x.iter().map(|v| fmt_float(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()
}

/// Columns `t, W, Wdot, N1, N2, residual, dist`; `dist` is empty without a critical set.
pub fn write_decay_csv(path: &Path, decay: &DecayReport, dist: Option<&TimeSeries>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "W", "Wdot", "N1", "N2", "residual", "dist"])
        .map_err(csv_err)?;
    for k in 0..decay.w_series.len() {
        let d = dist.map_or(String::new(), |s| fmt_float(s.values()[k]));
        w.write_record([
            fmt_float(decay.w_series.times()[k]),
            fmt_float(decay.w_series.values()[k]),
            fmt_float(decay.wdot_series.values()[k]),
            fmt_float(decay.n1_series.values()[k]),
            fmt_float(decay.n2_series.values()[k]),
            fmt_float(decay.residual_series.values()[k]),
            d,
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

/// Columns `T, min_dist, bound, pass`.
pub fn write_window_csv(path: &Path, sub: &SubsequenceReport) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["T", "min_dist", "bound", "pass"]).map_err(csv_err)?;
    for c in &sub.window_checks {
        w.write_record([
            fmt_float(c.t),
            fmt_float(c.min_dist),
            fmt_float(c.bound),
            c.pass.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

/// Lines listing built-in system ids and objectives.
pub fn list_builtins() -> Vec<String> {
    let mut out: Vec<String> = BUILTIN_SYSTEMS.iter().map(|s| format!("system {s}")).collect();
    out.extend(BUILTIN_OBJECTIVES.iter().map(|o| format!("objective {o}")));
    out.push("pair energy | perturbed | [pair.quadratic]".into());
    out
}
