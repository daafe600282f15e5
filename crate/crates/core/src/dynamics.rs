//! ODE integration and the time-series utilities every certificate is built on.
//!
//! Trajectories are produced by an explicit Runge–Kutta integrator (fixed-step
//! RK4 or adaptive Dormand–Prince 5(4)) and, by default, resampled onto a
//! uniform grid with cubic Hermite interpolation so that downstream quadrature
//! and windowed checks see a predictable grid.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// State norm above which a trajectory is considered to have blown up.
pub const BLOWUP_NORM: f64 = 1e12;

/// Number of dense-output intervals used when `dense_output_dt` is not set.
pub const DEFAULT_DENSE_INTERVALS: f64 = 2000.0;

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// An autonomous system `x' = f(x)` on `R^dimension`.
#[derive(Clone)]
pub struct SystemSpec {
    name: String,
    dimension: usize,
    field: VectorField,
}

impl SystemSpec {
    /// `field(x, out)` must write `f(x)` into `out` (both of length `dimension`).
    pub fn new<F>(name: impl Into<String>, dimension: usize, field: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(dimension > 0, "system dimension must be positive");
        SystemSpec {
            name: name.into(),
            dimension,
            field: Arc::new(field),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dimension);
        debug_assert_eq!(out.len(), self.dimension);
        (self.field)(x, out)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        self.eval_into(x, &mut out);
        out
    }
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Classic fixed-step fourth-order Runge–Kutta with step `dt_init`.
    Rk4,
    /// Dormand–Prince 5(4) with embedded error control.
    #[default]
    Rk45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub t_end: f64,
    pub dt_init: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_steps: usize,
    /// Uniform resampling step. `None` means `t_end / 2000`; `Some(0.0)`
    /// keeps the raw integrator steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_output_dt: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            method: Method::Rk45,
            t_end: 10.0,
            dt_init: 1e-3,
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_steps: 5_000_000,
            dense_output_dt: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_horizon(t_end: f64) -> Self {
        IntegratorConfig {
            t_end,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(invalid(format!("t_end must be positive, got {}", self.t_end)));
        }
        if !(self.dt_init > 0.0) {
            return Err(invalid(format!("dt_init must be positive, got {}", self.dt_init)));
        }
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(invalid("abs_tol and rel_tol must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be at least 1"));
        }
        if let Some(dt) = self.dense_output_dt {
            if !(dt >= 0.0 && dt.is_finite()) {
                return Err(invalid(format!("dense_output_dt must be >= 0, got {dt}")));
            }
        }
        Ok(())
    }

    /// Effective resampling step (0 means raw steps).
    pub fn dense_dt(&self) -> f64 {
        self.dense_output_dt.unwrap_or(self.t_end / DEFAULT_DENSE_INTERVALS)
    }
}

/// A time-stamped sequence of states produced by [`integrate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    system_name: String,
    truncated: bool,
}

impl Trajectory {
    /// Builds a trajectory from pre-computed samples (used by tests and by
    /// callers that integrate elsewhere).
    pub fn from_samples(
        system_name: impl Into<String>,
        times: Vec<f64>,
        states: Vec<Vec<f64>>,
        truncated: bool,
    ) -> Result<Self> {
        if times.is_empty() || times.len() != states.len() {
            return Err(invalid("trajectory needs matching, nonempty times and states"));
        }
        if times[0] != 0.0 {
            return Err(invalid("trajectory must start at t = 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("trajectory times must be strictly increasing"));
        }
        let dim = states[0].len();
        if states
            .iter()
            .any(|s| s.len() != dim || s.iter().any(|v| !v.is_finite()))
        {
            return Err(invalid("trajectory states must be finite and equally sized"));
        }
        Ok(Trajectory {
            times,
            states,
            system_name: system_name.into(),
            truncated,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn system_name(&self) -> &str {
        &self.system_name
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.states[0].len()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("nonempty trajectory")
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }
}

/// Real-valued samples on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(invalid(format!(
                "time series length mismatch: {} times vs {} values",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("time series times must be strictly increasing"));
        }
        Ok(TimeSeries { times, values })
    }

    /// Samples `g` on `times`.
    pub fn from_fn(times: &[f64], g: impl Fn(f64) -> f64) -> Result<Self> {
        TimeSeries::new(times.to_vec(), times.iter().map(|&t| g(t)).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        *self.values.last().expect("nonempty series")
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Pointwise combination of two series on the same grid.
    pub fn zip_with(&self, other: &TimeSeries, f: impl Fn(f64, f64) -> f64) -> Result<TimeSeries> {
        if self.times != other.times {
            return Err(invalid("series are not on a shared grid"));
        }
        Ok(TimeSeries {
            times: self.times.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> TimeSeries {
        TimeSeries {
            times: self.times.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Index of the first sample inside the final `fraction` of the time span.
    pub fn tail_start(&self, fraction: f64) -> usize {
        let t0 = self.times[0];
        let t1 = *self.times.last().unwrap();
        let cut = t1 - fraction * (t1 - t0);
        self.times.partition_point(|&t| t < cut)
    }

    /// Indices of the final `fraction` window, failing if it holds fewer than
    /// `min_samples` points.
    pub fn tail_window(&self, fraction: f64, min_samples: usize) -> Result<std::ops::Range<usize>> {
        if self.is_empty() {
            return Err(invalid("empty series"));
        }
        let start = self.tail_start(fraction);
        let n = self.len() - start;
        if n < min_samples {
            return Err(invalid(format!(
                "final {:.0}% window holds {n} samples, need at least {min_samples}",
                fraction * 100.0
            )));
        }
        Ok(start..self.len())
    }

    pub fn tail_mean(&self, fraction: f64, min_samples: usize) -> Result<f64> {
        let w = self.tail_window(fraction, min_samples)?;
        let n = w.len() as f64;
        Ok(self.values[w].iter().sum::<f64>() / n)
    }
}

/// Integrates `x' = f(x)` from `x0` over `[0, config.t_end]`.
///
/// Blow-up (state norm above [`BLOWUP_NORM`] or non-finite values) and
/// exhaustion of `max_steps` end the run early with `truncated = true`; the
/// offending state is never stored.
pub fn integrate(system: &SystemSpec, x0: &[f64], config: &IntegratorConfig) -> Result<Trajectory> {
    config.validate()?;
    if x0.len() != system.dimension() {
        return Err(invalid(format!(
            "x0 has dimension {} but system '{}' has dimension {}",
            x0.len(),
            system.name(),
            system.dimension()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("x0 has non-finite entries"));
    }
    let f0 = system.eval(x0);
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("f(x0) is not finite"));
    }

    let raw = match config.method {
        Method::Rk4 => rk4(system, x0, f0, config),
        Method::Rk45 => dopri5(system, x0, f0, config),
    };

    let dt = config.dense_dt();
    let (times, states) = if dt > 0.0 {
        resample(&raw, dt, config.t_end)
    } else {
        (raw.times.clone(), raw.states.clone())
    };
    Ok(Trajectory {
        times,
        states,
        system_name: system.name().to_string(),
        truncated: raw.truncated,
    })
}

/// Accepted steps with their slopes, before resampling.
struct RawSolution {
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    truncated: bool,
}

impl RawSolution {
    fn new(x0: &[f64], f0: Vec<f64>) -> Self {
        RawSolution {
            times: vec![0.0],
            states: vec![x0.to_vec()],
            slopes: vec![f0],
            truncated: false,
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn admissible(y: &[f64]) -> bool {
    y.iter().all(|v| v.is_finite()) && norm(y) <= BLOWUP_NORM
}

fn axpy_into(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &[f64])]) {
    for i in 0..out.len() {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

fn rk4(system: &SystemSpec, x0: &[f64], f0: Vec<f64>, cfg: &IntegratorConfig) -> RawSolution {
    let n = x0.len();
    let mut sol = RawSolution::new(x0, f0);
    let (mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut t = 0.0;
    let mut steps = 0usize;
    while t < cfg.t_end {
        if steps >= cfg.max_steps {
            sol.truncated = true;
            break;
        }
        let last = cfg.t_end - t <= cfg.dt_init * (1.0 + 1e-12);
        let h = if last { cfg.t_end - t } else { cfg.dt_init };
        let y = sol.states.last().unwrap().clone();
        let k1 = sol.slopes.last().unwrap().clone();
        axpy_into(&mut tmp, &y, h, &[(0.5, &k1)]);
        system.eval_into(&tmp, &mut k2);
        axpy_into(&mut tmp, &y, h, &[(0.5, &k2)]);
        system.eval_into(&tmp, &mut k3);
        axpy_into(&mut tmp, &y, h, &[(1.0, &k3)]);
        system.eval_into(&tmp, &mut k4);
        let mut y_new = vec![0.0; n];
        axpy_into(
            &mut y_new,
            &y,
            h,
            &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)],
        );
        steps += 1;
        if !admissible(&y_new) {
            sol.truncated = true;
            break;
        }
        let f_new = system.eval(&y_new);
        if f_new.iter().any(|v| !v.is_finite()) {
            sol.truncated = true;
            break;
        }
        t = if last { cfg.t_end } else { t + h };
        sol.times.push(t);
        sol.states.push(y_new);
        sol.slopes.push(f_new);
    }
    sol
}

// Dormand–Prince 5(4) tableau. The nodes c_i are not needed for autonomous fields.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn dopri5(system: &SystemSpec, x0: &[f64], f0: Vec<f64>, cfg: &IntegratorConfig) -> RawSolution {
    let n = x0.len();
    let mut sol = RawSolution::new(x0, f0);
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut t = 0.0;
    let mut h = cfg.dt_init.min(cfg.t_end);
    let mut attempts = 0usize;
    let mut rejected_last = false;

    while t < cfg.t_end {
        if attempts >= cfg.max_steps {
            sol.truncated = true;
            break;
        }
        attempts += 1;
        let last = t + h >= cfg.t_end * (1.0 - 1e-14);
        if last {
            h = cfg.t_end - t;
        }
        let y = sol.states.last().unwrap();
        k[0].copy_from_slice(sol.slopes.last().unwrap());

        axpy_into(&mut tmp, y, h, &[(A21, &k[0])]);
        system.eval_into(&tmp, &mut k[1]);
        axpy_into(&mut tmp, y, h, &[(A31, &k[0]), (A32, &k[1])]);
        system.eval_into(&tmp, &mut k[2]);
        axpy_into(&mut tmp, y, h, &[(A41, &k[0]), (A42, &k[1]), (A43, &k[2])]);
        system.eval_into(&tmp, &mut k[3]);
        axpy_into(
            &mut tmp,
            y,
            h,
            &[(A51, &k[0]), (A52, &k[1]), (A53, &k[2]), (A54, &k[3])],
        );
        system.eval_into(&tmp, &mut k[4]);
        axpy_into(
            &mut tmp,
            y,
            h,
            &[(A61, &k[0]), (A62, &k[1]), (A63, &k[2]), (A64, &k[3]), (A65, &k[4])],
        );
        system.eval_into(&tmp, &mut k[5]);
        axpy_into(
            &mut y_new,
            y,
            h,
            &[(B1, &k[0]), (B3, &k[2]), (B4, &k[3]), (B5, &k[4]), (B6, &k[5])],
        );
        system.eval_into(&y_new, &mut k[6]);

        let mut err = 0.0;
        let mut finite = true;
        for i in 0..n {
            let e = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            let r = e / sc;
            if !r.is_finite() || !k[6][i].is_finite() {
                finite = false;
            }
            err += r * r;
        }
        let err = (err / n as f64).sqrt();

        if finite && err <= 1.0 {
            if !admissible(&y_new) {
                sol.truncated = true;
                break;
            }
            t = if last { cfg.t_end } else { t + h };
            sol.times.push(t);
            sol.states.push(y_new.clone());
            sol.slopes.push(k[6].clone());
            let fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            let fac_max = if rejected_last { 1.0 } else { 5.0 };
            h *= fac.clamp(0.2, fac_max);
            rejected_last = false;
        } else {
            let fac = if finite {
                (0.9 * err.powf(-0.2)).clamp(0.2, 1.0)
            } else {
                0.25
            };
            h *= fac;
            rejected_last = true;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            // Step size underflow: the solution is leaving any bounded region.
            sol.truncated = true;
            break;
        }
    }
    sol
}

/// Cubic Hermite resampling onto `0, dt, 2dt, ...` (ending exactly at the
/// last reached time when `dt` divides the horizon).
fn resample(raw: &RawSolution, dt: f64, t_end: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let t_last = *raw.times.last().unwrap();
    let grid = uniform_grid(dt, t_end);
    let mut times = Vec::with_capacity(grid.len());
    let mut states = Vec::with_capacity(grid.len());
    let mut seg = 0usize;
    for tau in grid {
        if tau > t_last {
            break;
        }
        while seg + 1 < raw.times.len() - 1 && raw.times[seg + 1] < tau {
            seg += 1;
        }
        let state = if raw.times.len() == 1 || tau == raw.times[seg] {
            raw.states[seg].clone()
        } else if tau == raw.times[seg + 1] {
            raw.states[seg + 1].clone()
        } else {
            hermite(raw, seg, tau)
        };
        times.push(tau);
        states.push(state);
    }
    (times, states)
}

fn hermite(raw: &RawSolution, seg: usize, tau: f64) -> Vec<f64> {
    let (t0, t1) = (raw.times[seg], raw.times[seg + 1]);
    let h = t1 - t0;
    let s = (tau - t0) / h;
    let h01 = s * s * (3.0 - 2.0 * s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h11 = -s * s * (1.0 - s);
    let (y0, y1) = (&raw.states[seg], &raw.states[seg + 1]);
    let (f0, f1) = (&raw.slopes[seg], &raw.slopes[seg + 1]);
    (0..y0.len())
        .map(|i| y0[i] + h01 * (y1[i] - y0[i]) + h * (h10 * f0[i] + h11 * f1[i]))
        .collect()
}

/// Uniform grid on `[0, t_end]` with spacing `dt`; the final node is `t_end`.
pub fn uniform_grid(dt: f64, t_end: f64) -> Vec<f64> {
    let n = (t_end / dt).round();
    if n >= 1.0 && (n * dt - t_end).abs() <= 1e-9 * t_end {
        let n = n as usize;
        return (0..=n).map(|k| k as f64 * t_end / n as f64).collect();
    }
    let mut grid: Vec<f64> = (0..)
        .map(|k| k as f64 * dt)
        .take_while(|&t| t < t_end * (1.0 - 1e-12))
        .collect();
    grid.push(t_end);
    grid
}

/// Evaluates an observable along a trajectory.
pub fn evaluate_along(traj: &Trajectory, g: impl Fn(&[f64]) -> f64) -> Result<TimeSeries> {
    let mut values = Vec::with_capacity(traj.len());
    for (k, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let v = g(x);
        if !v.is_finite() {
            return Err(Error::Evaluation {
                index: k,
                time: *t,
                message: format!("observable returned {v}"),
            });
        }
        values.push(v);
    }
    TimeSeries::new(traj.times.clone(), values)
}

/// Second-order finite-difference derivative on a (possibly nonuniform) grid:
/// three-point central stencil inside, one-sided three-point stencil at the ends.
pub fn numerical_derivative(series: &TimeSeries) -> Result<TimeSeries> {
    let n = series.len();
    if n < 3 {
        return Err(invalid(format!(
            "numerical derivative needs at least 3 samples, got {n}"
        )));
    }
    let t = &series.times;
    let f = &series.values;
    let mut d = vec![0.0; n];

    // Written in difference form so that constant series give exact zeros.
    let (h1, h2) = (t[1] - t[0], t[2] - t[1]);
    d[0] = (h1 + h2) / (h1 * h2) * (f[1] - f[0]) - h1 / (h2 * (h1 + h2)) * (f[2] - f[0]);

    for i in 1..n - 1 {
        let (h1, h2) = (t[i] - t[i - 1], t[i + 1] - t[i]);
        d[i] = -h2 / (h1 * (h1 + h2)) * (f[i - 1] - f[i]) + h1 / (h2 * (h1 + h2)) * (f[i + 1] - f[i]);
    }

    let (h1, h2) = (t[n - 2] - t[n - 3], t[n - 1] - t[n - 2]);
    d[n - 1] = (h1 + h2) / (h1 * h2) * (f[n - 1] - f[n - 2]) - h2 / (h1 * (h1 + h2)) * (f[n - 1] - f[n - 3]);

    TimeSeries::new(t.clone(), d)
}

/// Trapezoidal rule over the stored grid.
pub fn quadrature(series: &TimeSeries) -> Result<f64> {
    if series.len() < 2 {
        return Err(invalid(format!(
            "quadrature needs at least 2 samples, got {}",
            series.len()
        )));
    }
    Ok(series
        .times
        .windows(2)
        .zip(series.values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum())
}
