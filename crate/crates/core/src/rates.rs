//! Convergence to the critical set `E`: distance series, the `L²` bound,
//! windowed and pointwise `t^{-1/2}` rates, exponential rates under
//! quadratic growth, and empirical stability probing.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificates::{within_budget, DecayReport, MIN_TAIL_SAMPLES, TAIL_FRACTION};
use crate::dynamics::{evaluate_along, integrate, quadrature, IntegratorConfig, SystemSpec, TimeSeries, Trajectory};
use crate::error::{invalid, Result};

pub type DistanceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type ProjectionFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type SamplerFn = Arc<dyn Fn(usize) -> Vec<f64> + Send + Sync>;

/// Default seed for random probe directions.
pub const DEFAULT_PROBE_SEED: u64 = 0xC0FFEE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticalSetKind {
    Point,
    AffineSubspace,
    Product,
    Custom,
}

#[derive(Clone)]
enum SetRepr {
    Point(Vec<f64>),
    /// `basis` is orthonormal.
    Affine {
        base: Vec<f64>,
        basis: Vec<Vec<f64>>,
    },
    Product(Vec<CriticalSetSpec>),
    Custom {
        dimension: usize,
        distance: DistanceFn,
        projection: Option<ProjectionFn>,
    },
}

/// The set `E` where both observables vanish, described by a distance evaluator.
#[derive(Clone)]
pub struct CriticalSetSpec {
    repr: SetRepr,
    sampler: Option<SamplerFn>,
}

impl fmt::Debug for CriticalSetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CriticalSetSpec")
            .field("kind", &self.kind())
            .field("dimension", &self.dimension())
            .field("has_sampler", &self.sampler.is_some())
            .finish()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `0, 1, -1, 2, -2, ...`
fn centered(k: usize) -> f64 {
    let j = k.div_ceil(2) as f64;
    if k % 2 == 1 {
        j
    } else {
        -j
    }
}

impl CriticalSetSpec {
    pub fn point(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
            return Err(invalid("point set needs finite coordinates"));
        }
        let q = p.clone();
        Ok(CriticalSetSpec {
            repr: SetRepr::Point(p),
            sampler: Some(Arc::new(move |_| q.clone())),
        })
    }

    /// `base + span(directions)`; the directions are orthonormalized and
    /// must be linearly independent.
    pub fn affine(base: Vec<f64>, directions: Vec<Vec<f64>>) -> Result<Self> {
        let n = base.len();
        if n == 0 || base.iter().any(|v| !v.is_finite()) {
            return Err(invalid("affine set needs a finite basepoint"));
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(directions.len());
        for (j, d) in directions.into_iter().enumerate() {
            if d.len() != n {
                return Err(invalid(format!(
                    "direction {j} has length {}, basepoint has length {n}",
                    d.len()
                )));
            }
            let scale = norm(&d);
            let mut u = d;
            for b in &basis {
                let c = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let r = norm(&u);
            if !(r > 1e-12 * scale.max(1e-300)) {
                return Err(invalid(format!(
                    "direction {j} is linearly dependent on the previous ones"
                )));
            }
            u.iter_mut().for_each(|x| *x /= r);
            basis.push(u);
        }
        Ok(CriticalSetSpec {
            repr: SetRepr::Affine { base, basis },
            sampler: None,
        })
    }

    /// Cartesian product; the state is the concatenation of the blocks.
    pub fn product(blocks: Vec<CriticalSetSpec>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid("product set needs at least one block"));
        }
        let sampler: Option<SamplerFn> = if blocks.iter().all(|b| b.sampler.is_some()) {
            let bs = blocks.clone();
            Some(Arc::new(move |k| {
                bs.iter().flat_map(|b| (b.sampler.as_ref().unwrap())(k)).collect()
            }))
        } else {
            None
        };
        Ok(CriticalSetSpec {
            repr: SetRepr::Product(blocks),
            sampler,
        })
    }

    pub fn custom<D>(dimension: usize, distance: D) -> Self
    where
        D: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        CriticalSetSpec {
            repr: SetRepr::Custom {
                dimension,
                distance: Arc::new(distance),
                projection: None,
            },
            sampler: None,
        }
    }

    /// Attaches a nearest-point map to a custom set.
    pub fn with_projection<P>(mut self, projection: P) -> Self
    where
        P: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if let SetRepr::Custom { projection: p, .. } = &mut self.repr {
            *p = Some(Arc::new(projection));
        }
        self
    }

    pub fn with_sampler<S>(mut self, sampler: S) -> Self
    where
        S: Fn(usize) -> Vec<f64> + Send + Sync + 'static,
    {
        self.sampler = Some(Arc::new(sampler));
        self
    }

    /// For affine sets: sample `k` moves along direction `k mod d` by
    /// `spacing` times the `k / d`-th term of `0, 1, -1, 2, -2, ...`.
    pub fn with_grid_sampler(mut self, spacing: f64) -> Result<Self> {
        let SetRepr::Affine { base, basis } = &self.repr else {
            return Err(invalid("grid sampler applies to affine sets only"));
        };
        let (base, basis) = (base.clone(), basis.clone());
        self.sampler = Some(Arc::new(move |k| {
            if basis.is_empty() {
                return base.clone();
            }
            let d = basis.len();
            let s = spacing * centered(k / d);
            base.iter().zip(&basis[k % d]).map(|(b, u)| b + s * u).collect()
        }));
        Ok(self)
    }

    pub fn kind(&self) -> CriticalSetKind {
        match &self.repr {
            SetRepr::Point(_) => CriticalSetKind::Point,
            SetRepr::Affine { .. } => CriticalSetKind::AffineSubspace,
            SetRepr::Product(_) => CriticalSetKind::Product,
            SetRepr::Custom { .. } => CriticalSetKind::Custom,
        }
    }

    /// True for a single point, including products of points and
    /// zero-dimensional affine sets.
    pub fn is_singleton(&self) -> bool {
        match &self.repr {
            SetRepr::Point(_) => true,
            SetRepr::Affine { basis, .. } => basis.is_empty(),
            SetRepr::Product(bs) => bs.iter().all(CriticalSetSpec::is_singleton),
            SetRepr::Custom { .. } => false,
        }
    }

    pub fn dimension(&self) -> usize {
        match &self.repr {
            SetRepr::Point(p) => p.len(),
            SetRepr::Affine { base, .. } => base.len(),
            SetRepr::Product(bs) => bs.iter().map(CriticalSetSpec::dimension).sum(),
            SetRepr::Custom { dimension, .. } => *dimension,
        }
    }

    pub fn has_sampler(&self) -> bool {
        self.sampler.is_some()
    }

    pub fn sample(&self, k: usize) -> Option<Vec<f64>> {
        self.sampler.as_ref().map(|s| s(k))
    }

    /// Euclidean distance to the set; `NaN` on a dimension mismatch.
    pub fn distance(&self, x: &[f64]) -> f64 {
        if x.len() != self.dimension() {
            return f64::NAN;
        }
        match &self.repr {
            SetRepr::Point(p) => dist(x, p),
            SetRepr::Affine { .. } | SetRepr::Product(_) => {
                let p = self.project(x).expect("affine and product sets always project");
                dist(x, &p)
            }
            SetRepr::Custom { distance, .. } => distance(x),
        }
    }

    /// Nearest point of the set, when available.
    pub fn project(&self, x: &[f64]) -> Option<Vec<f64>> {
        if x.len() != self.dimension() {
            return None;
        }
        match &self.repr {
            SetRepr::Point(p) => Some(p.clone()),
            SetRepr::Affine { base, basis } => {
                let rel: Vec<f64> = x.iter().zip(base).map(|(a, b)| a - b).collect();
                let mut p = base.clone();
                for u in basis {
                    let c = dot(&rel, u);
                    p.iter_mut().zip(u).for_each(|(a, b)| *a += c * b);
                }
                Some(p)
            }
            SetRepr::Product(bs) => {
                let mut out = Vec::with_capacity(x.len());
                let mut off = 0;
                for b in bs {
                    let d = b.dimension();
                    out.extend(b.project(&x[off..off + d])?);
                    off += d;
                }
                Some(out)
            }
            SetRepr::Custom { projection, .. } => projection.as_ref().map(|p| p(x)),
        }
    }
}

/// `dist(x(t_k), E)` on the trajectory grid.
pub fn distance_series(traj: &Trajectory, set: &CriticalSetSpec) -> Result<TimeSeries> {
    if traj.dimension() != set.dimension() {
        return Err(invalid(format!(
            "critical set has dimension {}, trajectory has dimension {}",
            set.dimension(),
            traj.dimension()
        )));
    }
    evaluate_along(traj, |x| set.distance(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    pub terminal_mean: f64,
    pub terminal_max: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Pass iff the mean distance over the final 5% window is at most `threshold`.
pub fn check_convergence_to_e(dist: &TimeSeries, threshold: f64) -> Result<ConvergenceCheck> {
    let w = dist.tail_window(TAIL_FRACTION, MIN_TAIL_SAMPLES)?;
    let vals = &dist.values()[w];
    let terminal_mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let terminal_max = vals.iter().copied().fold(0.0, f64::max);
    Ok(ConvergenceCheck {
        terminal_mean,
        terminal_max,
        threshold,
        pass: terminal_mean <= threshold,
    })
}

/// `N1 + N2 >= c dist(x, E)²` near `E`; optionally per observable
/// `N_i >= c_i dist²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBoundParams {
    pub c: f64,
    pub neighborhood_radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c2: Option<f64>,
}

impl ErrorBoundParams {
    pub fn new(c: f64, neighborhood_radius: f64) -> Result<Self> {
        let p = ErrorBoundParams {
            c,
            neighborhood_radius,
            c1: None,
            c2: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(invalid(format!("error bound c must be positive, got {}", self.c)));
        }
        if !(self.neighborhood_radius > 0.0) {
            return Err(invalid(format!(
                "neighborhood_radius must be positive, got {}",
                self.neighborhood_radius
            )));
        }
        for (name, v) in [("c1", self.c1), ("c2", self.c2)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(invalid(format!("error bound {name} must be positive, got {v}")));
                }
            }
        }
        if let (Some(c1), Some(c2)) = (self.c1, self.c2) {
            if (c1 + c2 - self.c).abs() > 1e-12 * self.c.max(1.0) {
                return Err(invalid(format!(
                    "error bound requires c = c1 + c2, got c = {}, c1 + c2 = {}",
                    self.c,
                    c1 + c2
                )));
            }
        }
        Ok(())
    }
}

/// Distances below this are treated as being on `E` when forming ratios.
const RATIO_FLOOR: f64 = 1e-100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerObservableBound {
    pub worst_ratio_n1: Option<f64>,
    pub worst_ratio_n2: Option<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Report {
    /// `∫ dist² dt` over the horizon.
    pub integral_dist_sq: f64,
    /// `(W(0) - W_∞) / (γ c)`.
    pub budget: f64,
    pub w_limit_estimate: f64,
    pub integral_within_budget: bool,
    /// Minimum of `(N1 + N2) / (c dist²)` inside the neighborhood.
    pub worst_ratio: Option<f64>,
    pub aggregate_bound_holds: bool,
    pub samples_in_neighborhood: usize,
    /// First time after which the trajectory stays inside the neighborhood.
    pub entry_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_observable: Option<PerObservableBound>,
    pub pass: bool,
}

/// First time after which `series <= level` holds to the end.
fn settling_time(series: &TimeSeries, level: f64) -> Option<f64> {
    let v = series.values();
    if *v.last()? > level {
        return None;
    }
    let k = v.iter().rposition(|&d| d > level).map_or(0, |k| k + 1);
    Some(series.times()[k])
}

pub fn l2_distance_bound(dist: &TimeSeries, decay: &DecayReport, eb: &ErrorBoundParams) -> Result<L2Report> {
    eb.validate()?;
    let gamma = decay.gamma();
    if !(gamma > 0.0) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    let w = &decay.w_series;
    let sq = dist.map(|d| d * d);
    if sq.times() != w.times() {
        return Err(invalid("distance and W series are not on a shared grid"));
    }
    let integral_dist_sq = quadrature(&sq)?;
    let w_limit_estimate = w.tail_mean(TAIL_FRACTION, 1)?;
    let budget = (w.first() - w_limit_estimate) / (gamma * eb.c);

    let mut worst: Option<f64> = None;
    let mut worst1: Option<f64> = None;
    let mut worst2: Option<f64> = None;
    let mut inside = 0;
    let (n1, n2) = (decay.n1_series.values(), decay.n2_series.values());
    for (k, &d) in dist.values().iter().enumerate() {
        if !(d > RATIO_FLOOR && d <= eb.neighborhood_radius) {
            continue;
        }
        inside += 1;
        let d2 = d * d;
        let r = (n1[k] + n2[k]) / (eb.c * d2);
        worst = Some(worst.map_or(r, |m: f64| m.min(r)));
        if let Some(c1) = eb.c1 {
            let r = n1[k] / (c1 * d2);
            worst1 = Some(worst1.map_or(r, |m: f64| m.min(r)));
        }
        if let Some(c2) = eb.c2 {
            let r = n2[k] / (c2 * d2);
            worst2 = Some(worst2.map_or(r, |m: f64| m.min(r)));
        }
    }
    let ok = |r: Option<f64>| r.is_none_or(|r| r >= 1.0 - 1e-9);
    let per_observable = (eb.c1.is_some() || eb.c2.is_some()).then(|| PerObservableBound {
        worst_ratio_n1: worst1,
        worst_ratio_n2: worst2,
        holds: ok(worst1) && ok(worst2),
    });
    let integral_within_budget = within_budget(integral_dist_sq, budget);
    let aggregate_bound_holds = ok(worst);
    Ok(L2Report {
        integral_dist_sq,
        budget,
        w_limit_estimate,
        integral_within_budget,
        worst_ratio: worst,
        aggregate_bound_holds,
        samples_in_neighborhood: inside,
        entry_time: settling_time(dist, eb.neighborhood_radius),
        per_observable,
        pass: integral_within_budget && aggregate_bound_holds,
    })
}

/// `K = sqrt((W(0) - W_∞) / (γ c))` with `W_∞` the final-window mean.
pub fn rate_constant(w: &TimeSeries, gamma: f64, c: f64) -> Result<f64> {
    if !(gamma > 0.0 && c > 0.0) {
        return Err(invalid(format!("gamma and c must be positive, got {gamma} and {c}")));
    }
    let w_inf = w.tail_mean(TAIL_FRACTION, 1)?;
    Ok(((w.first() - w_inf) / (gamma * c)).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCheck {
    pub t: f64,
    pub min_dist: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsequenceReport {
    pub k: f64,
    pub window_checks: Vec<WindowCheck>,
    pub notes: Vec<String>,
    pub pass: bool,
}

/// `T ∈ {H/64, H/32, ..., H/2}` measured from the first sample.
pub fn default_window_grid(horizon: f64) -> Vec<f64> {
    (1..=6).rev().map(|j| horizon / f64::from(1u32 << j)).collect()
}

/// For each `T`, compares `min dist` over `[T, 2T]` against `K/√T`.
pub fn subsequence_rate(dist: &TimeSeries, k: f64, grid: Option<&[f64]>) -> Result<SubsequenceReport> {
    if dist.is_empty() {
        return Err(invalid("empty distance series"));
    }
    if !(k >= 0.0) {
        return Err(invalid(format!("K must be nonnegative, got {k}")));
    }
    let t_first = dist.times()[0];
    let horizon = *dist.times().last().unwrap() - t_first;
    let grid = grid.map_or_else(|| default_window_grid(horizon), <[f64]>::to_vec);
    let mut window_checks = Vec::new();
    let mut notes = Vec::new();
    for t in grid {
        if !(t > 0.0) || 2.0 * t > horizon * (1.0 + 1e-12) {
            notes.push(format!("window T = {t} skipped: need 0 < 2T <= horizon {horizon}"));
            continue;
        }
        let (lo, hi) = (t_first + t, t_first + 2.0 * t);
        let min = dist
            .times()
            .iter()
            .zip(dist.values())
            .filter(|(s, _)| **s >= lo && **s <= hi * (1.0 + 1e-12))
            .map(|(_, d)| *d)
            .fold(f64::INFINITY, f64::min);
        if min == f64::INFINITY {
            notes.push(format!("window T = {t} skipped: no samples in [{lo}, {hi}]"));
            continue;
        }
        let bound = k / t.sqrt();
        window_checks.push(WindowCheck {
            t,
            min_dist: min,
            bound,
            pass: min <= bound,
        });
    }
    let pass = window_checks.iter().all(|w| w.pass);
    Ok(SubsequenceReport {
        k,
        window_checks,
        notes,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointwiseConfig {
    /// The tail is `[tail_start_fraction * H, H]`.
    pub tail_start_fraction: f64,
    pub monotone_slack: f64,
    pub min_samples: usize,
    /// Fits with exponent at least this value pass.
    pub exponent_threshold: f64,
}

impl Default for PointwiseConfig {
    fn default() -> Self {
        PointwiseConfig {
            tail_start_fraction: 0.25,
            monotone_slack: 1e-9,
            min_samples: 50,
            exponent_threshold: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseReport {
    pub tail_start: f64,
    pub monotone_tail: bool,
    /// Earliest time after which the distance is nonincreasing (within slack).
    pub monotone_onset: Option<f64>,
    pub c_fit: Option<f64>,
    pub exponent_fit: Option<f64>,
    pub fit_points: usize,
    /// `dist <= C_fit / √t` on the tail.
    pub envelope_holds: bool,
    /// `dist <= √2 K / √t` on the tail, when `K` is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_envelope_holds: Option<bool>,
    pub pointwise_pass: bool,
}

/// Least squares `y = a + b x`; `None` for fewer than two distinct abscissae.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// Distances at or below this are excluded from the log-log fit.
pub const FIT_FLOOR: f64 = 1e-14;

pub fn pointwise_rate(dist: &TimeSeries, k: Option<f64>) -> Result<PointwiseReport> {
    pointwise_rate_with(dist, k, &PointwiseConfig::default())
}

/// Fits `log dist = log C - p log t` on the tail and decides
/// `monotone ∧ (p >= 0.45 ∨ dist <= C/√t)`.
pub fn pointwise_rate_with(dist: &TimeSeries, k: Option<f64>, cfg: &PointwiseConfig) -> Result<PointwiseReport> {
    if dist.is_empty() {
        return Err(invalid("empty distance series"));
    }
    let times = dist.times();
    let t_first = times[0];
    let horizon = *times.last().unwrap() - t_first;
    let tail_start = t_first + cfg.tail_start_fraction * horizon;
    let start = times.partition_point(|&t| t < tail_start);
    let n = times.len() - start;
    if n < cfg.min_samples {
        return Err(invalid(format!(
            "pointwise tail holds {n} samples, need at least {}",
            cfg.min_samples
        )));
    }
    let (ts, ds) = (&times[start..], &dist.values()[start..]);
    let slack = cfg.monotone_slack;
    let monotone_tail = ds.windows(2).all(|p| p[1] <= p[0] + slack);
    let all = dist.values();
    let onset_index = match all.windows(2).rposition(|p| p[1] > p[0] + slack) {
        None => Some(0),
        Some(j) if j + 1 < all.len() - 1 => Some(j + 1),
        Some(_) => None,
    };

    let (xs, ys): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(ds)
        .filter(|(t, d)| **t > 0.0 && **d > FIT_FLOOR)
        .map(|(t, d)| (t.ln(), d.ln()))
        .unzip();
    let fit = if xs.len() >= 3 { linear_fit(&xs, &ys) } else { None };
    let (c_fit, exponent_fit) = match fit {
        Some((a, b)) => (Some(a.exp()), Some(-b)),
        None => (None, None),
    };
    let below = |c: f64| {
        ts.iter()
            .zip(ds)
            .all(|(t, d)| *d <= FIT_FLOOR || (*t > 0.0 && *d <= c / t.sqrt() * (1.0 + 1e-9)))
    };
    let envelope_holds = match c_fit {
        Some(c) => below(c),
        None => ds.iter().all(|d| *d <= FIT_FLOOR),
    };
    let k_envelope_holds = k.map(|k| below(std::f64::consts::SQRT_2 * k));
    let fast = exponent_fit.is_some_and(|p| p >= cfg.exponent_threshold);
    Ok(PointwiseReport {
        tail_start,
        monotone_tail,
        monotone_onset: onset_index.map(|j| times[j]),
        c_fit,
        exponent_fit,
        fit_points: xs.len(),
        envelope_holds,
        k_envelope_holds,
        pointwise_pass: monotone_tail && (fast || envelope_holds),
    })
}

/// `W - W_∞ >= m dist²` for `dist <= r`; `upper_m` optionally supplies
/// `W - W_∞ <= M dist²` for the two-sided envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticGrowthParams {
    pub m: f64,
    pub r: f64,
    /// Defaults to the final-window mean of `W`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_infinity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_m: Option<f64>,
}

impl QuadraticGrowthParams {
    pub fn new(m: f64, r: f64) -> Result<Self> {
        let q = QuadraticGrowthParams {
            m,
            r,
            w_infinity: None,
            upper_m: None,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m.is_finite()) {
            return Err(invalid(format!("quadratic growth m must be positive, got {}", self.m)));
        }
        if !(self.r > 0.0) {
            return Err(invalid(format!(
                "quadratic growth radius r must be positive, got {}",
                self.r
            )));
        }
        if let Some(w) = self.w_infinity {
            if !w.is_finite() {
                return Err(invalid("w_infinity must be finite"));
            }
        }
        if let Some(u) = self.upper_m {
            if !(u >= self.m && u.is_finite()) {
                return Err(invalid(format!("upper_m must be finite and >= m, got {u}")));
            }
        }
        Ok(())
    }
}

pub const ENVELOPE_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    /// Exponent of `exp(-rate (t - t0))`.
    pub rate: f64,
    pub holds: bool,
    /// Maximum of `dist / envelope` over `t >= t0`.
    pub worst_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentialReport {
    pub applicable: bool,
    pub t0: Option<f64>,
    pub w_infinity: f64,
    /// Envelope `sqrt((W(t0) - W_∞)/m) exp(-(γc/(2m))(t - t0))`.
    pub envelope: Option<EnvelopeCheck>,
    /// Same prefactor with rate `γc/(2M)`, when `upper_m` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_envelope: Option<EnvelopeCheck>,
    pub growth_holds: bool,
    /// Minimum of `(W - W_∞) - m dist²` over `t >= t0`.
    pub worst_growth_margin: Option<f64>,
    /// Maximum of `(W - W_∞)/dist²` over `t >= t0`: the smallest valid `M`.
    pub empirical_upper_constant: Option<f64>,
    /// Fitted `λ` in `W - W_∞ ≈ A e^{-λ t}`.
    pub fitted_w_decay_rate: Option<f64>,
    pub pass: bool,
}

fn envelope_check(ts: &[f64], ds: &[f64], t0: f64, amp: f64, rate: f64) -> EnvelopeCheck {
    let mut worst: f64 = 0.0;
    let mut holds = true;
    for (t, d) in ts.iter().zip(ds) {
        let env = amp * (-rate * (t - t0)).exp();
        if *d > env * (1.0 + ENVELOPE_SLACK) {
            holds = false;
        }
        if *d > 0.0 {
            worst = worst.max(if env > 0.0 { d / env } else { f64::INFINITY });
        }
    }
    EnvelopeCheck {
        rate,
        holds,
        worst_ratio: if worst.is_finite() { worst } else { f64::MAX },
    }
}

pub fn exponential_rate(
    dist: &TimeSeries,
    w: &TimeSeries,
    qg: &QuadraticGrowthParams,
    gamma: f64,
    c: f64,
) -> Result<ExponentialReport> {
    qg.validate()?;
    if !(gamma > 0.0 && c > 0.0) {
        return Err(invalid(format!("gamma and c must be positive, got {gamma} and {c}")));
    }
    if dist.times() != w.times() {
        return Err(invalid("distance and W series are not on a shared grid"));
    }
    let w_infinity = match qg.w_infinity {
        Some(v) => v,
        None => w.tail_mean(TAIL_FRACTION, 1)?,
    };
    let Some(t0) = settling_time(dist, qg.r) else {
        return Ok(ExponentialReport {
            applicable: false,
            t0: None,
            w_infinity,
            envelope: None,
            upper_envelope: None,
            growth_holds: false,
            worst_growth_margin: None,
            empirical_upper_constant: None,
            fitted_w_decay_rate: None,
            pass: false,
        });
    };
    let start = dist.times().partition_point(|&t| t < t0);
    let ts = &dist.times()[start..];
    let ds = &dist.values()[start..];
    let gap: Vec<f64> = w.values()[start..].iter().map(|v| v - w_infinity).collect();

    let mut worst_margin = f64::INFINITY;
    let mut growth_holds = true;
    let mut upper: f64 = 0.0;
    for (g, d) in gap.iter().zip(ds) {
        let need = qg.m * d * d;
        let margin = g - need;
        worst_margin = worst_margin.min(margin);
        if margin < -(1e-9 * need + 1e-15) {
            growth_holds = false;
        }
        if *d > RATIO_FLOOR {
            upper = upper.max(g / (d * d));
        }
    }

    let amp = (gap[0].max(0.0) / qg.m).sqrt();
    let envelope = envelope_check(ts, ds, t0, amp, gamma * c / (2.0 * qg.m));
    let upper_envelope = qg
        .upper_m
        .map(|big| envelope_check(ts, ds, t0, amp, gamma * c / (2.0 * big)));

    let floor = 1e-12 * gap[0].max(0.0);
    let (xs, ys): (Vec<f64>, Vec<f64>) = ts
        .iter()
        .zip(&gap)
        .filter(|(_, g)| **g > floor && **g > 0.0)
        .map(|(t, g)| (*t, g.ln()))
        .unzip();
    let fitted_w_decay_rate = if xs.len() >= 3 {
        linear_fit(&xs, &ys).map(|(_, b)| -b)
    } else {
        None
    };

    let pass = envelope.holds && growth_holds;
    Ok(ExponentialReport {
        applicable: true,
        t0: Some(t0),
        w_infinity,
        envelope: Some(envelope),
        upper_envelope,
        growth_holds,
        worst_growth_margin: Some(worst_margin),
        empirical_upper_constant: (upper > 0.0).then_some(upper),
        fitted_w_decay_rate,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Number of points sampled on `E` (a point set uses one).
    pub samples: usize,
    pub radii: Vec<f64>,
    pub directions_per_radius: usize,
    /// A probe is stable iff `max_t |x(t) - z| <= excursion_factor * radius`.
    pub excursion_factor: f64,
    /// Bound on both the terminal distance to `E` and the terminal drift.
    pub convergence_threshold: f64,
    pub seed: u64,
    /// Extra initial states whose trajectories join the convergence table.
    pub initial_states: Vec<Vec<f64>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples: 8,
            radii: vec![1e-2, 1e-3],
            directions_per_radius: 4,
            excursion_factor: 10.0,
            convergence_threshold: 1e-6,
            seed: DEFAULT_PROBE_SEED,
            initial_states: Vec::new(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.directions_per_radius == 0 || self.radii.is_empty() {
            return Err(invalid("probe needs at least one sample, radius and direction"));
        }
        if self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(invalid("probe radii must be positive and finite"));
        }
        if !(self.excursion_factor >= 1.0) {
            return Err(invalid("probe excursion_factor must be at least 1"));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(invalid("probe convergence_threshold must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "AS")]
    AsymptoticallyStable,
    #[serde(rename = "SS")]
    Semistable,
    #[serde(rename = "PAS")]
    PointwiseAsymptoticallyStable,
    #[serde(rename = "inconclusive")]
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::AsymptoticallyStable => "AS",
            Verdict::Semistable => "SS",
            Verdict::PointwiseAsymptoticallyStable => "PAS",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub sample_index: usize,
    pub radius: f64,
    pub direction_index: usize,
    pub max_excursion: f64,
    pub ratio: f64,
    pub truncated: bool,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub label: String,
    pub terminal_dist: f64,
    /// Diameter of the states over the final 5% window.
    pub drift: f64,
    pub limit_point: Vec<f64>,
    pub truncated: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub verdict: Verdict,
    /// Verdicts come from finitely many probes, never from a proof.
    pub empirical: bool,
    pub seed: u64,
    pub lyapunov_stability_table: Vec<StabilityRow>,
    pub convergence_table: Vec<ConvergenceRow>,
    pub failing_rows: Vec<String>,
}

/// Largest pairwise distance among the states in the final 5% window.
pub fn terminal_drift(traj: &Trajectory) -> Result<f64> {
    let times = TimeSeries::new(traj.times().to_vec(), vec![0.0; traj.len()])?;
    let w = times.tail_window(TAIL_FRACTION, MIN_TAIL_SAMPLES)?;
    let states = &traj.states()[w];
    let mut diam: f64 = 0.0;
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            diam = diam.max(dist(a, b));
        }
    }
    Ok(diam)
}

fn convergence_row(label: String, traj: &Trajectory, set: &CriticalSetSpec, threshold: f64) -> Result<ConvergenceRow> {
    let terminal_dist = set.distance(traj.final_state());
    let drift = if traj.truncated() {
        f64::INFINITY
    } else {
        terminal_drift(traj)?
    };
    let truncated = traj.truncated();
    Ok(ConvergenceRow {
        label,
        terminal_dist,
        drift: if drift.is_finite() { drift } else { f64::MAX },
        limit_point: traj.final_state().to_vec(),
        truncated,
        converged: !truncated && terminal_dist <= threshold && drift <= threshold,
    })
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let r = norm(&v);
        if r > 1e-8 {
            return v.into_iter().map(|a| a / r).collect();
        }
    }
}

/// Empirical stability classification of `E`.
///
/// Lyapunov stability is probed from `z + r u` for sampled `z ∈ E`, each
/// radius `r` and random unit `u`; every probe trajectory also enters the
/// convergence table.
pub fn classify_stability(
    system: &SystemSpec,
    set: &CriticalSetSpec,
    probe: &ProbeConfig,
    integ: &IntegratorConfig,
    e_is_equilibrium_set: bool,
) -> Result<StabilityVerdict> {
    probe.validate()?;
    integ.validate()?;
    let n = system.dimension();
    if set.dimension() != n {
        return Err(invalid(format!(
            "critical set has dimension {}, system has dimension {n}",
            set.dimension()
        )));
    }
    let is_point = set.is_singleton();
    if !is_point && !set.has_sampler() {
        return Err(invalid(
            "critical set needs an equilibria sampler for stability probing",
        ));
    }
    let samples = if is_point { 1 } else { probe.samples };

    struct Job {
        sample_index: usize,
        radius: f64,
        direction_index: usize,
        center: Vec<f64>,
        start: Vec<f64>,
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut jobs = Vec::new();
    for s in 0..samples {
        let z = set
            .sample(s)
            .or_else(|| set.project(&vec![0.0; n]))
            .ok_or_else(|| invalid("singleton critical set exposes neither a sampler nor a projection"))?;
        if z.len() != n {
            return Err(invalid(format!(
                "sampler returned a state of length {}, expected {n}",
                z.len()
            )));
        }
        for &radius in &probe.radii {
            for d in 0..probe.directions_per_radius {
                let u = unit_vector(&mut rng, n);
                let start = z.iter().zip(&u).map(|(a, b)| a + radius * b).collect();
                jobs.push(Job {
                    sample_index: s,
                    radius,
                    direction_index: d,
                    center: z.clone(),
                    start,
                });
            }
        }
    }

    let probed: Vec<(StabilityRow, ConvergenceRow)> = jobs
        .par_iter()
        .map(|job| {
            let traj = integrate(system, &job.start, integ)?;
            let max_excursion = traj.states().iter().map(|x| dist(x, &job.center)).fold(0.0, f64::max);
            let ratio = max_excursion / job.radius;
            let truncated = traj.truncated();
            let row = StabilityRow {
                sample_index: job.sample_index,
                radius: job.radius,
                direction_index: job.direction_index,
                max_excursion,
                ratio,
                truncated,
                stable: !truncated && ratio <= probe.excursion_factor,
            };
            let label = format!(
                "probe sample={} radius={:e} direction={}",
                job.sample_index, job.radius, job.direction_index
            );
            let conv = convergence_row(label, &traj, set, probe.convergence_threshold)?;
            Ok((row, conv))
        })
        .collect::<Result<_>>()?;

    let extra: Vec<ConvergenceRow> = probe
        .initial_states
        .par_iter()
        .enumerate()
        .map(|(k, x0)| {
            let traj = integrate(system, x0, integ)?;
            convergence_row(format!("initial_state {k}"), &traj, set, probe.convergence_threshold)
        })
        .collect::<Result<_>>()?;

    let (lyapunov_stability_table, mut convergence_table): (Vec<_>, Vec<_>) = probed.into_iter().unzip();
    convergence_table.extend(extra);

    let mut failing_rows = Vec::new();
    for r in lyapunov_stability_table.iter().filter(|r| !r.stable) {
        failing_rows.push(format!(
            "stability: sample {} radius {:e} direction {}: excursion ratio {:.6e} > {}{}",
            r.sample_index,
            r.radius,
            r.direction_index,
            r.ratio,
            probe.excursion_factor,
            if r.truncated { " (truncated)" } else { "" }
        ));
    }
    for r in convergence_table.iter().filter(|r| !r.converged) {
        failing_rows.push(format!(
            "convergence: {}: terminal dist {:.6e}, drift {:.6e}, threshold {:e}{}",
            r.label,
            r.terminal_dist,
            r.drift,
            probe.convergence_threshold,
            if r.truncated { " (truncated)" } else { "" }
        ));
    }

    let verdict = if !failing_rows.is_empty() {
        Verdict::Inconclusive
    } else if is_point {
        Verdict::AsymptoticallyStable
    } else if e_is_equilibrium_set {
        Verdict::Semistable
    } else {
        Verdict::PointwiseAsymptoticallyStable
    };
    Ok(StabilityVerdict {
        verdict,
        empirical: true,
        seed: probe.seed,
        lyapunov_stability_table,
        convergence_table,
        failing_rows,
    })
}
