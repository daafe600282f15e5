//! Lyapunov pairs, slope bounds, the composite certificate `W = V1 + δ V2`,
//! and the trajectory checks that follow from strict decay: the residual of
//! `W' + γ (N1 + N2) <= 0`, the integral dissipation budget, and vanishing of
//! the observables.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{evaluate_along, numerical_derivative, quadrature, TimeSeries, Trajectory};
use crate::error::{invalid, Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type InteractionFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Fraction of the horizon used for terminal statistics.
pub const TAIL_FRACTION: f64 = 0.05;
/// Minimum number of samples in the terminal window.
pub const MIN_TAIL_SAMPLES: usize = 20;
/// Relative tolerance of the analytic-vs-numerical `W'` cross-check.
pub const WDOT_CROSSCHECK_REL: f64 = 5e-3;
/// Slack used by the integral budget inequality.
pub const BUDGET_REL_SLACK: f64 = 1e-6;
pub const BUDGET_ABS_SLACK: f64 = 1e-9;

/// The hypothesis bundle: `V1' <= -N1` and `V2' <= -N2 + h(N1)`.
///
/// A pair built with [`LyapunovPair::single`] has `V2 = 0` and `h = 0`; the
/// composite then reduces to `W = V1` and the certificate's `γ` equals `δ`.
#[derive(Clone)]
pub struct LyapunovPair {
    v1: ScalarFn,
    v2: ScalarFn,
    n1: ScalarFn,
    n2: ScalarFn,
    h: InteractionFn,
    v1_dot: Option<ScalarFn>,
    v2_dot: Option<ScalarFn>,
    declared_slope: Option<f64>,
    single: bool,
}

impl LyapunovPair {
    pub fn new<V1, N1, V2, N2, H>(v1: V1, n1: N1, v2: V2, n2: N2, h: H) -> Result<Self>
    where
        V1: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        N1: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        V2: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        N2: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        H: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let h0 = h(0.0);
        if !(h0.abs() <= 1e-12) {
            return Err(Error::HypothesisViolation(format!(
                "interaction function must satisfy h(0) = 0, got h(0) = {h0}"
            )));
        }
        Ok(LyapunovPair {
            v1: Arc::new(v1),
            v2: Arc::new(v2),
            n1: Arc::new(n1),
            n2: Arc::new(n2),
            h: Arc::new(h),
            v1_dot: None,
            v2_dot: None,
            declared_slope: None,
            single: false,
        })
    }

    /// Single-function mode: `W` is given directly and dissipates `N1 + N2`.
    pub fn single<W, N1, N2>(w: W, n1: N1, n2: N2) -> Self
    where
        W: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        N1: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        N2: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        LyapunovPair {
            v1: Arc::new(w),
            v2: Arc::new(|_| 0.0),
            n1: Arc::new(n1),
            n2: Arc::new(n2),
            h: Arc::new(|_| 0.0),
            v1_dot: None,
            v2_dot: Some(Arc::new(|_| 0.0)),
            declared_slope: Some(0.0),
            single: true,
        }
    }

    /// Attaches analytic time derivatives `V1'(x) = ∇V1·f` and `V2'(x)`.
    pub fn with_derivatives<D1, D2>(mut self, v1_dot: D1, v2_dot: D2) -> Self
    where
        D1: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        D2: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.v1_dot = Some(Arc::new(v1_dot));
        self.v2_dot = Some(Arc::new(v2_dot));
        self
    }

    /// Analytic derivative of `W` for a single-function pair.
    pub fn with_wdot<D>(mut self, wdot: D) -> Self
    where
        D: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        self.v1_dot = Some(Arc::new(wdot));
        if self.v2_dot.is_none() {
            self.v2_dot = Some(Arc::new(|_| 0.0));
        }
        self
    }

    /// Declares an analytic global slope bound; it is spot-checked on the
    /// default grid when a certificate is requested through [`slope_bound_for`].
    pub fn with_declared_slope(mut self, slope: f64) -> Self {
        self.declared_slope = Some(slope);
        self
    }

    pub fn is_single(&self) -> bool {
        self.single
    }

    pub fn declared_slope(&self) -> Option<f64> {
        self.declared_slope
    }

    pub fn has_analytic_wdot(&self) -> bool {
        self.v1_dot.is_some() && self.v2_dot.is_some()
    }

    pub fn v1(&self, x: &[f64]) -> f64 {
        (self.v1)(x)
    }

    pub fn v2(&self, x: &[f64]) -> f64 {
        (self.v2)(x)
    }

    pub fn n1(&self, x: &[f64]) -> f64 {
        (self.n1)(x)
    }

    pub fn n2(&self, x: &[f64]) -> f64 {
        (self.n2)(x)
    }

    pub fn h(&self, r: f64) -> f64 {
        (self.h)(r)
    }

    pub fn interaction(&self) -> InteractionFn {
        self.h.clone()
    }

    /// Composite `W = V1 + δ V2`.
    pub fn w(&self, x: &[f64], delta: f64) -> f64 {
        if self.single {
            self.v1(x)
        } else {
            self.v1(x) + delta * self.v2(x)
        }
    }

    pub fn wdot(&self, x: &[f64], delta: f64) -> Option<f64> {
        let d1 = self.v1_dot.as_ref()?(x);
        if self.single {
            return Some(d1);
        }
        let d2 = self.v2_dot.as_ref()?(x);
        Some(d1 + delta * d2)
    }
}

impl fmt::Debug for LyapunovPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LyapunovPair")
            .field("single", &self.single)
            .field("analytic_wdot", &self.has_analytic_wdot())
            .field("declared_slope", &self.declared_slope)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlopeKind {
    /// `sup_{r>0} h(r)/r`
    #[serde(rename = "global_l")]
    GlobalL,
    /// Supremum over the values of `N1` visited by a trajectory.
    #[serde(rename = "local_b_omega")]
    LocalBOmega,
    /// `sup_{0<s<=R} h(s)/s`
    #[serde(rename = "bounded_range_l_r")]
    BoundedRangeLR,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeValue {
    Finite(f64),
    Unbounded,
}

impl SlopeValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            SlopeValue::Finite(v) => Some(v),
            SlopeValue::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeBound {
    pub kind: SlopeKind,
    pub value: SlopeValue,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub range_r: Option<f64>,
    pub sample_grid: Vec<f64>,
    /// True when the value was declared analytically and only spot-checked.
    #[serde(default)]
    pub declared: bool,
}

impl SlopeBound {
    /// A global bound of known value with no sampling (used in tests and for
    /// single-function pairs, where `h = 0`).
    pub fn exact(value: f64) -> Self {
        SlopeBound {
            kind: SlopeKind::GlobalL,
            value: SlopeValue::Finite(value),
            range_r: None,
            sample_grid: Vec::new(),
            declared: true,
        }
    }
}

/// Log-uniform grid on `[lo, hi]` with exact endpoints.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && points >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    let mut g: Vec<f64> = (0..points)
        .map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp())
        .collect();
    g[0] = lo;
    g[points - 1] = hi;
    g
}

pub const DEFAULT_SLOPE_GRID: (f64, f64, usize) = (1e-8, 1e4, 400);

pub fn default_slope_grid() -> Vec<f64> {
    let (lo, hi, n) = DEFAULT_SLOPE_GRID;
    log_grid(lo, hi, n)
}

fn ratios(h: &dyn Fn(f64) -> f64, grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&r| {
            let v = h(r);
            if !v.is_finite() {
                return Err(Error::HypothesisViolation(format!("h({r}) = {v} is not finite")));
            }
            if v < 0.0 {
                return Err(Error::HypothesisViolation(format!(
                    "h must be nonnegative, got h({r}) = {v}"
                )));
            }
            Ok(v / r)
        })
        .collect()
}

/// True when the running maximum of `ratios`, swept toward the end of
/// `ratios` (grid order given by `grid`), still grows by more than 1% over the
/// final decade of `grid`.
fn grows_over_last_decade(grid: &[f64], ratios: &[f64], toward_low: bool) -> bool {
    let (inner, outer) = if toward_low {
        let cut = grid[0] * 10.0;
        let inner = grid
            .iter()
            .zip(ratios)
            .filter(|(r, _)| **r >= cut)
            .map(|(_, q)| *q)
            .fold(f64::NEG_INFINITY, f64::max);
        (inner, ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    } else {
        let cut = grid[grid.len() - 1] / 10.0;
        let inner = grid
            .iter()
            .zip(ratios)
            .filter(|(r, _)| **r <= cut)
            .map(|(_, q)| *q)
            .fold(f64::NEG_INFINITY, f64::max);
        (inner, ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    if !inner.is_finite() {
        // Grid spans less than a decade; nothing to extrapolate from.
        return false;
    }
    outer > 1.01 * inner.max(0.0) && outer > 0.0
}

/// Samples `sup_{r>0} h(r)/r` on `grid` (default: 400 log-uniform points on
/// `[1e-8, 1e4]`), returning [`SlopeValue::Unbounded`] if the running
/// maximum keeps growing at either end of the grid.
pub fn slope_bound_global(h: &dyn Fn(f64) -> f64, grid: Option<&[f64]>) -> Result<SlopeBound> {
    let grid = match grid {
        Some(g) => {
            if g.is_empty() || g.iter().any(|r| !(*r > 0.0)) {
                return Err(invalid("slope grid must be nonempty with positive entries"));
            }
            let mut g = g.to_vec();
            g.sort_by(f64::total_cmp);
            g
        }
        None => default_slope_grid(),
    };
    let q = ratios(h, &grid)?;
    let unbounded = grows_over_last_decade(&grid, &q, true) || grows_over_last_decade(&grid, &q, false);
    let value = if unbounded {
        SlopeValue::Unbounded
    } else {
        SlopeValue::Finite(q.iter().copied().fold(0.0, f64::max))
    };
    Ok(SlopeBound {
        kind: SlopeKind::GlobalL,
        value,
        range_r: None,
        sample_grid: grid,
        declared: false,
    })
}

fn bounded_range(h: &dyn Fn(f64) -> f64, range: f64, kind: SlopeKind) -> Result<SlopeBound> {
    if !(range > 0.0 && range.is_finite()) {
        return Err(invalid(format!("slope range R must be positive, got {range}")));
    }
    let grid = log_grid(1e-8 * range, range, DEFAULT_SLOPE_GRID.2);
    let q = ratios(h, &grid)?;
    let value = if grows_over_last_decade(&grid, &q, true) {
        SlopeValue::Unbounded
    } else {
        SlopeValue::Finite(q.iter().copied().fold(0.0, f64::max))
    };
    Ok(SlopeBound {
        kind,
        value,
        range_r: Some(range),
        sample_grid: grid,
        declared: false,
    })
}

/// `L_R = sup_{0<s<=R} h(s)/s` on a log-uniform grid over `[1e-8 R, R]`.
pub fn slope_bound_local(h: &dyn Fn(f64) -> f64, range: f64) -> Result<SlopeBound> {
    bounded_range(h, range, SlopeKind::BoundedRangeLR)
}

/// Slope bound over the range of `N1` actually visited: `R = max N1(x(t))`.
pub fn slope_bound_along(h: &dyn Fn(f64) -> f64, n1: &TimeSeries) -> Result<SlopeBound> {
    let range = n1.max();
    if range <= 0.0 {
        return Ok(SlopeBound {
            kind: SlopeKind::LocalBOmega,
            value: SlopeValue::Finite(0.0),
            range_r: Some(0.0),
            sample_grid: Vec::new(),
            declared: false,
        });
    }
    bounded_range(h, range, SlopeKind::LocalBOmega)
}

/// Accepts an analytic global bound after checking it against `h(r)/r` on the grid.
pub fn declared_slope_bound(h: &dyn Fn(f64) -> f64, value: f64, grid: Option<&[f64]>) -> Result<SlopeBound> {
    if !(value >= 0.0 && value.is_finite()) {
        return Err(invalid(format!(
            "declared slope bound must be finite and >= 0, got {value}"
        )));
    }
    let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(default_slope_grid);
    let q = ratios(h, &grid)?;
    if let Some((r, ratio)) = grid.iter().zip(&q).find(|(_, q)| **q > value + 1e-12) {
        return Err(Error::HypothesisViolation(format!(
            "declared slope bound {value} is below h(r)/r = {ratio} at r = {r}"
        )));
    }
    Ok(SlopeBound {
        kind: SlopeKind::GlobalL,
        value: SlopeValue::Finite(value),
        range_r: None,
        sample_grid: grid,
        declared: true,
    })
}

/// Global slope bound of a pair: the declared value when present (spot
/// checked), otherwise the sampled supremum.
pub fn slope_bound_for(pair: &LyapunovPair) -> Result<SlopeBound> {
    let h = pair.interaction();
    match pair.declared_slope() {
        Some(v) if pair.is_single() => Ok(SlopeBound::exact(v)),
        Some(v) => declared_slope_bound(&*h, v, None),
        None => slope_bound_global(&*h, None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeCertificate {
    pub delta: f64,
    pub gamma: f64,
    pub slope: SlopeBound,
}

/// `δ* = γ* = 1/(1+L)`, the balance point of `1 - δL = δ`.
pub fn optimal_delta(slope: &SlopeBound) -> Result<CompositeCertificate> {
    let l = slope.value.finite().ok_or_else(|| {
        Error::NoCertificate("slope bound is unbounded; use the bounded-range or trajectory-local bound".into())
    })?;
    let delta = 1.0 / (1.0 + l);
    Ok(CompositeCertificate {
        delta,
        gamma: delta,
        slope: slope.clone(),
    })
}

/// Upper end of the admissible interval `(0, 1/L)`.
pub fn admissible_delta_max(slope: f64) -> f64 {
    if slope == 0.0 {
        f64::INFINITY
    } else {
        1.0 / slope
    }
}

pub fn gamma_for(delta: f64, slope: f64) -> f64 {
    (1.0 - delta * slope).min(delta)
}

/// Certificate for an explicit `δ ∈ (0, 1/L)` with `γ = min{1 - δL, δ}`.
pub fn make_certificate(slope: &SlopeBound, delta: f64) -> Result<CompositeCertificate> {
    let l = slope
        .value
        .finite()
        .ok_or_else(|| Error::NoCertificate("slope bound is unbounded; no admissible delta exists".into()))?;
    let upper = admissible_delta_max(l);
    if !(delta > 0.0 && delta < upper) {
        return Err(invalid(format!(
            "delta = {delta} is outside the admissible range (0, {upper})"
        )));
    }
    Ok(CompositeCertificate {
        delta,
        gamma: gamma_for(delta, l),
        slope: slope.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdotSource {
    Analytic,
    Numerical,
}

/// Analytic `W'` compared against the finite-difference derivative of `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the finite-difference derivative of `w` along `traj` with a
/// claimed closed form `expected`, within `5e-3 (1 + max|expected|)`.
pub fn derivative_identity_check(
    traj: &Trajectory,
    w: impl Fn(&[f64]) -> f64,
    expected: impl Fn(&[f64]) -> f64,
) -> Result<CrossCheck> {
    let numeric = numerical_derivative(&evaluate_along(traj, w)?)?;
    let claimed = evaluate_along(traj, expected)?;
    let max_discrepancy = numeric
        .values()
        .iter()
        .zip(claimed.values())
        .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
    let tolerance = WDOT_CROSSCHECK_REL * (1.0 + claimed.max_abs());
    Ok(CrossCheck {
        max_discrepancy,
        tolerance,
        pass: max_discrepancy <= tolerance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub certificate: CompositeCertificate,
    pub w_series: TimeSeries,
    pub wdot_series: TimeSeries,
    pub n1_series: TimeSeries,
    pub n2_series: TimeSeries,
    /// `W' + γ (N1 + N2)` on the shared grid.
    pub residual_series: TimeSeries,
    pub max_violation: f64,
    pub violation_times: Vec<f64>,
    pub tolerance: f64,
    pub wdot_source: WdotSource,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wdot_crosscheck: Option<CrossCheck>,
    pub truncated: bool,
}

impl DecayReport {
    /// No violations, and the analytic `W'` (if any) agrees with the data.
    pub fn passed(&self) -> bool {
        self.violation_times.is_empty() && self.wdot_crosscheck.as_ref().is_none_or(|c| c.pass)
    }

    pub fn gamma(&self) -> f64 {
        self.certificate.gamma
    }
}

/// Number of grid points at each end excluded from `violation_times`.
pub const BOUNDARY_EXCLUSION: usize = 2;

/// Checks `W' <= -γ (N1 + N2)` along `traj`.
///
/// `W'` comes from the pair's analytic derivatives when available (and is
/// then cross-checked against the numerical derivative), else from finite
/// differences of `W`. The default tolerance is `1e-6 (1 + max|W|)`.
pub fn verify_strict_decay(
    traj: &Trajectory,
    pair: &LyapunovPair,
    cert: &CompositeCertificate,
    tol: Option<f64>,
) -> Result<DecayReport> {
    let delta = cert.delta;
    let w = evaluate_along(traj, |x| pair.w(x, delta))?;
    let n1 = evaluate_along(traj, |x| pair.n1(x))?;
    let n2 = evaluate_along(traj, |x| pair.n2(x))?;
    for (name, s) in [("N1", &n1), ("N2", &n2)] {
        if let Some(k) = s.values().iter().position(|&v| v < 0.0) {
            return Err(Error::HypothesisViolation(format!(
                "{name} = {} < 0 at t = {}",
                s.values()[k],
                s.times()[k]
            )));
        }
    }

    let (wdot, source, crosscheck) = if pair.has_analytic_wdot() {
        let analytic = evaluate_along(traj, |x| pair.wdot(x, delta).unwrap())?;
        let crosscheck = if w.len() >= 3 {
            let numeric = numerical_derivative(&w)?;
            let max_discrepancy = analytic
                .values()
                .iter()
                .zip(numeric.values())
                .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
            let tolerance = WDOT_CROSSCHECK_REL * (1.0 + analytic.max_abs());
            Some(CrossCheck {
                max_discrepancy,
                tolerance,
                pass: max_discrepancy <= tolerance,
            })
        } else {
            None
        };
        (analytic, WdotSource::Analytic, crosscheck)
    } else {
        (numerical_derivative(&w)?, WdotSource::Numerical, None)
    };

    let gamma = cert.gamma;
    let dissipation = n1.zip_with(&n2, |a, b| a + b)?;
    let residual = wdot.zip_with(&dissipation, |d, n| d + gamma * n)?;
    let tolerance = tol.unwrap_or(1e-6 * (1.0 + w.max_abs()));
    if !(tolerance > 0.0) {
        return Err(invalid(format!("decay tolerance must be positive, got {tolerance}")));
    }
    let n = residual.len();
    let violation_times = residual
        .times()
        .iter()
        .zip(residual.values())
        .enumerate()
        .filter(|(k, (_, r))| *k >= BOUNDARY_EXCLUSION && *k + BOUNDARY_EXCLUSION < n && **r > tolerance)
        .map(|(_, (t, _))| *t)
        .collect();

    Ok(DecayReport {
        certificate: cert.clone(),
        max_violation: residual.max(),
        w_series: w,
        wdot_series: wdot,
        n1_series: n1,
        n2_series: n2,
        residual_series: residual,
        violation_times,
        tolerance,
        wdot_source: source,
        wdot_crosscheck: crosscheck,
        truncated: traj.truncated(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegralReport {
    /// `∫ (N1 + N2) dt` over the horizon.
    pub dissipation_integral: f64,
    /// `(W(0) - W(T)) / γ`.
    pub budget: f64,
    pub satisfied: bool,
    /// Mean of `W` over the final 5% of the horizon.
    pub w_limit_estimate: f64,
}

pub fn within_budget(integral: f64, budget: f64) -> bool {
    integral <= budget * (1.0 + BUDGET_REL_SLACK) + BUDGET_ABS_SLACK
}

pub fn integral_estimate(report: &DecayReport) -> Result<IntegralReport> {
    let total = report.n1_series.zip_with(&report.n2_series, |a, b| a + b)?;
    let dissipation_integral = quadrature(&total)?;
    let w = &report.w_series;
    let budget = (w.first() - w.last()) / report.gamma();
    Ok(IntegralReport {
        dissipation_integral,
        budget,
        satisfied: within_budget(dissipation_integral, budget),
        w_limit_estimate: w.tail_mean(TAIL_FRACTION, 1)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishingReport {
    pub terminal_n1: f64,
    pub terminal_n2: f64,
    /// Max `|d/dt N_i(x(t))|` over the tail: a finite-sample stand-in for
    /// uniform continuity of the observables.
    pub uc_surrogate_bound: f64,
    pub threshold: f64,
    pub vanished: bool,
    pub truncated: bool,
}

pub fn observable_vanishing(report: &DecayReport, threshold: f64) -> Result<VanishingReport> {
    vanishing_from_series(&report.n1_series, &report.n2_series, report.truncated, threshold)
}

/// Vanishing test on arbitrary observable series sharing one grid.
pub fn vanishing_from_series(
    n1: &TimeSeries,
    n2: &TimeSeries,
    truncated: bool,
    threshold: f64,
) -> Result<VanishingReport> {
    if n1.times() != n2.times() {
        return Err(invalid("observable series are not on a shared grid"));
    }
    let window = n1.tail_window(TAIL_FRACTION, MIN_TAIL_SAMPLES)?;
    let mean = |s: &TimeSeries| s.values()[window.clone()].iter().sum::<f64>() / window.len() as f64;
    let terminal_n1 = mean(n1);
    let terminal_n2 = mean(n2);
    let mut uc = 0.0f64;
    for s in [n1, n2] {
        let d = numerical_derivative(s)?;
        uc = d.values()[window.clone()].iter().fold(uc, |m, v| m.max(v.abs()));
    }
    Ok(VanishingReport {
        terminal_n1,
        terminal_n2,
        uc_surrogate_bound: uc,
        threshold,
        vanished: !truncated && terminal_n1 <= threshold && terminal_n2 <= threshold,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, IntegratorConfig, SystemSpec};
    use proptest::prelude::*;

    /// `x1' = -x1`, `x2' = -x2 + x1` with `V1 = x1²/2, N1 = x1²`,
    /// `V2 = x2²/2, N2 = x2²/2, h(r) = r/2`. Young's inequality gives
    /// `V2' = -x2² + x1 x2 <= -x2²/2 + x1²/2`.
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

    #[test]
    fn h_must_vanish_at_zero() {
        let err = LyapunovPair::new(|_| 0.0, |_| 0.0, |_| 0.0, |_| 0.0, |r| r + 1.0).unwrap_err();
        assert!(matches!(err, Error::HypothesisViolation(_)));
    }

    #[test]
    fn global_slope_examples() {
        let s = slope_bound_global(&|r| 2.0 * r, None).unwrap();
        assert!((s.value.finite().unwrap() - 2.0).abs() < 1e-9);

        // sup of 1/(1+r) is approached as r -> 0.
        let s = slope_bound_global(&|r| r / (1.0 + r), None).unwrap();
        assert!((s.value.finite().unwrap() - 1.0).abs() < 1e-6);

        let s = slope_bound_global(&|r: f64| r.sqrt(), None).unwrap();
        assert_eq!(s.value, SlopeValue::Unbounded);

        let s = slope_bound_global(&|r| r * r, None).unwrap();
        assert_eq!(s.value, SlopeValue::Unbounded);

        assert!(matches!(
            slope_bound_global(&|r| -r, None),
            Err(Error::HypothesisViolation(_))
        ));
        assert!(slope_bound_global(&|r| r, Some(&[])).is_err());
    }

    #[test]
    fn local_slope_examples() {
        let s = slope_bound_local(&|r| r * r, 2.0).unwrap();
        assert_eq!(s.kind, SlopeKind::BoundedRangeLR);
        assert_eq!(s.range_r, Some(2.0));
        assert!((s.value.finite().unwrap() - 2.0).abs() < 1e-12);

        let s = slope_bound_local(&|r| r * r, 0.5).unwrap();
        assert!((s.value.finite().unwrap() - 0.5).abs() < 1e-12);

        let s = slope_bound_local(&|_| 0.0, 3.0).unwrap();
        assert_eq!(s.value, SlopeValue::Finite(0.0));

        assert!(slope_bound_local(&|r| r, 0.0).is_err());
    }

    #[test]
    fn slope_along_uses_max_of_n1() {
        let n1 = TimeSeries::new(vec![0.0, 1.0, 2.0], vec![0.5, 2.0, 1.0]).unwrap();
        let s = slope_bound_along(&|r| r * r, &n1).unwrap();
        assert_eq!(s.kind, SlopeKind::LocalBOmega);
        assert_eq!(s.range_r, Some(2.0));
        assert!((s.value.finite().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn declared_slope_is_spot_checked() {
        assert!(declared_slope_bound(&|r| 0.5 * r, 0.5, None).is_ok());
        assert!(matches!(
            declared_slope_bound(&|r| 0.5 * r, 0.4, None),
            Err(Error::HypothesisViolation(_))
        ));
    }

    #[test]
    fn optimal_delta_examples() {
        for (l, want) in [(1.0, 0.5), (0.0, 1.0), (3.0, 0.25)] {
            let c = optimal_delta(&SlopeBound::exact(l)).unwrap();
            assert_eq!(c.delta, want);
            assert_eq!(c.gamma, want);
        }
        let unbounded = slope_bound_global(&|r: f64| r.sqrt(), None).unwrap();
        assert!(matches!(optimal_delta(&unbounded), Err(Error::NoCertificate(_))));
    }

    #[test]
    fn make_certificate_examples() {
        let l2 = SlopeBound::exact(2.0);
        assert_eq!(make_certificate(&l2, 0.25).unwrap().gamma, 0.25);
        let c = make_certificate(&l2, 1.0 / 3.0).unwrap();
        assert!((c.gamma - 1.0 / 3.0).abs() < 1e-15);
        let err = make_certificate(&l2, 0.6).unwrap_err().to_string();
        assert!(err.contains("(0, 0.5)"), "{err}");
        assert!(make_certificate(&l2, 0.0).is_err());
        // L = 0 admits any positive delta.
        assert_eq!(make_certificate(&SlopeBound::exact(0.0), 7.0).unwrap().gamma, 1.0);
    }

    #[test]
    fn coupled_system_has_no_violations() {
        let (sys, pair) = coupled();
        let slope = slope_bound_for(&pair.clone().with_declared_slope(0.5)).unwrap();
        let cert = optimal_delta(&slope).unwrap();
        assert!((cert.delta - 2.0 / 3.0).abs() < 1e-15);
        let traj = integrate(&sys, &[1.0, 1.0], &IntegratorConfig::with_horizon(20.0)).unwrap();
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        assert!(report.passed(), "max violation {}", report.max_violation);
        assert!(report.wdot_crosscheck.as_ref().unwrap().pass);
        assert!(integral_estimate(&report).unwrap().satisfied);

        // delta close to 1/L: still valid, with a small gamma.
        let cert = make_certificate(&slope, 0.99 * 2.0).unwrap();
        assert!((cert.gamma - (1.0 - 0.99 * 2.0 * 0.5)).abs() < 1e-15);
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        assert!(report.passed());
    }

    #[test]
    fn numerical_wdot_path_agrees_on_coupled_system() {
        let (sys, _) = coupled();
        let pair = LyapunovPair::new(
            |x| 0.5 * x[0] * x[0],
            |x| x[0] * x[0],
            |x| 0.5 * x[1] * x[1],
            |x| 0.5 * x[1] * x[1],
            |r| 0.5 * r,
        )
        .unwrap();
        // Use a non-optimal delta so the inequality is strict away from 0.
        let cert = make_certificate(&SlopeBound::exact(0.5), 0.5).unwrap();
        let traj = integrate(&sys, &[1.0, -1.0], &IntegratorConfig::with_horizon(20.0)).unwrap();
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        assert_eq!(report.wdot_source, WdotSource::Numerical);
        assert!(report.passed(), "max violation {}", report.max_violation);
    }

    #[test]
    fn equilibrium_trajectory_is_trivially_certified() {
        let (sys, pair) = coupled();
        let traj = integrate(&sys, &[0.0, 0.0], &IntegratorConfig::with_horizon(5.0)).unwrap();
        let cert = optimal_delta(&SlopeBound::exact(0.5)).unwrap();
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_violation, 0.0);
        let integral = integral_estimate(&report).unwrap();
        assert_eq!(integral.dissipation_integral, 0.0);
        assert_eq!(integral.budget, 0.0);
        assert!(integral.satisfied);
        let v = observable_vanishing(&report, 1e-12).unwrap();
        assert_eq!((v.terminal_n1, v.terminal_n2), (0.0, 0.0));
        assert!(v.vanished);
    }

    #[test]
    fn scalar_decay_observable_vanishes() {
        let sys = SystemSpec::new("decay", 1, |x, out| out[0] = -x[0]);
        let pair = LyapunovPair::single(|x| 0.5 * x[0] * x[0], |x| x[0] * x[0], |_| 0.0).with_wdot(|x| -x[0] * x[0]);
        let traj = integrate(&sys, &[1.0], &IntegratorConfig::with_horizon(20.0)).unwrap();
        let cert = optimal_delta(&slope_bound_for(&pair).unwrap()).unwrap();
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        let v = observable_vanishing(&report, 1e-8).unwrap();
        assert!(v.terminal_n1 <= 1e-8);
        assert!(v.vanished);
    }

    #[test]
    fn truncated_trajectory_never_vanishes() {
        let sys = SystemSpec::new("square", 1, |x, out| out[0] = x[0] * x[0]);
        let pair = LyapunovPair::single(|x| 0.5 * x[0] * x[0], |x| x[0] * x[0], |_| 0.0);
        let traj = integrate(&sys, &[1.0], &IntegratorConfig::with_horizon(2.0)).unwrap();
        let cert = optimal_delta(&SlopeBound::exact(0.0)).unwrap();
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        assert!(report.truncated);
        let v = observable_vanishing(&report, 1e-8).unwrap();
        assert!(v.truncated);
        assert!(!v.vanished);
    }

    #[test]
    fn vanishing_requires_long_enough_window() {
        let sys = SystemSpec::new("decay", 1, |x, out| out[0] = -x[0]);
        let pair = LyapunovPair::single(|x| 0.5 * x[0] * x[0], |x| x[0] * x[0], |_| 0.0);
        let cfg = IntegratorConfig {
            t_end: 1.0,
            dense_output_dt: Some(0.1),
            ..Default::default()
        };
        let traj = integrate(&sys, &[1.0], &cfg).unwrap();
        let cert = optimal_delta(&SlopeBound::exact(0.0)).unwrap();
        let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
        assert!(matches!(
            observable_vanishing(&report, 1e-8),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn negative_observable_is_a_hypothesis_violation() {
        let (sys, _) = coupled();
        let pair = LyapunovPair::single(|x| x[0], |x| x[0], |_| 0.0);
        let traj = integrate(&sys, &[-1.0, 0.0], &IntegratorConfig::with_horizon(1.0)).unwrap();
        let cert = optimal_delta(&SlopeBound::exact(0.0)).unwrap();
        assert!(matches!(
            verify_strict_decay(&traj, &pair, &cert, None),
            Err(Error::HypothesisViolation(_))
        ));
    }

    proptest! {
        #[test]
        fn optimal_gamma_dominates_grid(l in 0.01f64..50.0) {
            let c = optimal_delta(&SlopeBound::exact(l)).unwrap();
            let upper = 1.0 / l;
            for k in 1..=1000 {
                let d = upper * k as f64 / 1001.0;
                prop_assert!(c.gamma >= gamma_for(d, l) - 1e-12);
            }
        }

        #[test]
        fn certificate_gamma_is_min_formula(l in 0.0f64..20.0, frac in 0.001f64..0.999) {
            let slope = SlopeBound::exact(l);
            let delta = if l == 0.0 { frac * 10.0 } else { frac / l };
            let c = make_certificate(&slope, delta).unwrap();
            prop_assert_eq!(c.gamma, (1.0 - delta * l).min(delta));
            prop_assert!(c.gamma > 0.0);
        }

        #[test]
        fn linear_interaction_slope_is_exact(c in 0.0f64..100.0) {
            let s = slope_bound_global(&move |r| c * r, None).unwrap();
            prop_assert!((s.value.finite().unwrap() - c).abs() <= 1e-9 * (1.0 + c));
        }

        #[test]
        fn zero_violation_reports_are_monotone_and_within_budget(
            x1 in -1.0f64..1.0, x2 in -1.0f64..1.0,
        ) {
            let (sys, pair) = coupled();
            let cert = optimal_delta(&SlopeBound::exact(0.5)).unwrap();
            let traj = integrate(&sys, &[x1, x2], &IntegratorConfig::with_horizon(10.0)).unwrap();
            let report = verify_strict_decay(&traj, &pair, &cert, None).unwrap();
            prop_assert!(report.passed());
            let w = report.w_series.values();
            prop_assert!(w.windows(2).all(|p| p[1] <= p[0] + report.tolerance));
            prop_assert!(integral_estimate(&report).unwrap().satisfied);
        }

        #[test]
        fn scaling_first_function_keeps_certificate(scale in 0.25f64..4.0, x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
            let (sys, _) = coupled();
            let c = scale;
            let scaled = LyapunovPair::new(
                move |x| c * 0.5 * x[0] * x[0],
                move |x| c * x[0] * x[0],
                |x| 0.5 * x[1] * x[1],
                |x| 0.5 * x[1] * x[1],
                move |r| 0.5 * r / c,
            )
            .unwrap()
            .with_derivatives(move |x| -c * x[0] * x[0], |x| -x[1] * x[1] + x[0] * x[1]);
            let slope = slope_bound_for(&scaled.clone().with_declared_slope(0.5 / c)).unwrap();
            let cert = optimal_delta(&slope).unwrap();
            let traj = integrate(&sys, &[x1, x2], &IntegratorConfig::with_horizon(10.0)).unwrap();
            let report = verify_strict_decay(&traj, &scaled, &cert, None).unwrap();
            prop_assert!(report.passed());
        }
    }
}
