//! Two worked systems packaged as system + Lyapunov pair + critical set:
//! the inertial gradient system with viscous and Hessian damping (DIN), and
//! the primal–dual gradient flow on an equality-constrained problem.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certificates::{LyapunovPair, ScalarFn};
use crate::dynamics::SystemSpec;
use crate::error::{invalid, Error, Result};
use crate::rates::CriticalSetSpec;

pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type HvpFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// A `C²` objective `Φ` given by value, gradient and Hessian–vector product.
#[derive(Clone)]
pub struct ObjectiveSpec {
    name: String,
    dim: usize,
    value: ScalarFn,
    gradient: GradientFn,
    hvp: HvpFn,
    convex: bool,
    gradient_lipschitz_estimate: Option<f64>,
    argmin: Option<CriticalSetSpec>,
    min_value: Option<f64>,
}

impl fmt::Debug for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("convex", &self.convex)
            .field("gradient_lipschitz_estimate", &self.gradient_lipschitz_estimate)
            .field("argmin", &self.argmin)
            .field("min_value", &self.min_value)
            .finish_non_exhaustive()
    }
}

impl ObjectiveSpec {
    pub fn new<V, G, H>(name: impl Into<String>, dim: usize, value: V, gradient: G, hvp: H) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ObjectiveSpec {
            name: name.into(),
            dim,
            value: Arc::new(value),
            gradient: Arc::new(gradient),
            hvp: Arc::new(hvp),
            convex: false,
            gradient_lipschitz_estimate: None,
            argmin: None,
            min_value: None,
        }
    }

    pub fn with_convex(mut self, convex: bool) -> Self {
        self.convex = convex;
        self
    }

    pub fn with_gradient_lipschitz(mut self, l: f64) -> Self {
        self.gradient_lipschitz_estimate = Some(l);
        self
    }

    /// Set of minimizers and the minimum value.
    pub fn with_argmin(mut self, argmin: CriticalSetSpec, min_value: f64) -> Self {
        self.argmin = Some(argmin);
        self.min_value = Some(min_value);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn convex(&self) -> bool {
        self.convex
    }

    pub fn gradient_lipschitz_estimate(&self) -> Option<f64> {
        self.gradient_lipschitz_estimate
    }

    pub fn argmin(&self) -> Option<&CriticalSetSpec> {
        self.argmin.as_ref()
    }

    pub fn min_value(&self) -> Option<f64> {
        self.min_value
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.gradient_into(x, &mut g);
        g
    }

    pub fn hvp_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        (self.hvp)(x, v, out)
    }

    pub fn hvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.dim];
        self.hvp_into(x, v, &mut h);
        h
    }

    /// Compares the gradient and Hessian–vector product against central
    /// differences at `probes` random points of the unit ball.
    pub fn check_derivatives(&self, probes: usize, seed: u64) -> DerivativeCheck {
        let n = self.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grad_err: f64 = 0.0;
        let mut hvp_err: f64 = 0.0;
        for _ in 0..probes {
            let x = ball_point(&mut rng, n);
            let v = ball_point(&mut rng, n);
            let g = self.gradient(&x);
            let mut fd = vec![0.0; n];
            for i in 0..n {
                let h = 1e-6 * x[i].abs().max(1.0);
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                fd[i] = (self.value(&xp) - self.value(&xm)) / (2.0 * h);
            }
            grad_err = grad_err.max(norm(&sub(&g, &fd)) / norm(&g).max(1.0));

            let hv = self.hvp(&x, &v);
            let h = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd: Vec<f64> = self
                .gradient(&xp)
                .iter()
                .zip(self.gradient(&xm))
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            hvp_err = hvp_err.max(norm(&sub(&hv, &fd)) / norm(&hv).max(1.0));
        }
        DerivativeCheck {
            probes,
            max_gradient_rel_error: grad_err,
            max_hvp_rel_error: hvp_err,
            pass: grad_err <= 1e-5 && hvp_err <= 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub probes: usize,
    pub max_gradient_rel_error: f64,
    pub max_hvp_rel_error: f64,
    pub pass: bool,
}

fn ball_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        if norm(&x) <= 1.0 {
            return x;
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `Φ(x) = ½‖x‖²` on `ℝⁿ`.
pub fn quad_iso(n: usize) -> ObjectiveSpec {
    ObjectiveSpec::new(
        "quad_iso",
        n,
        |x| 0.5 * norm_sq(x),
        |x, g| g.copy_from_slice(x),
        |_, v, out| out.copy_from_slice(v),
    )
    .with_convex(true)
    .with_gradient_lipschitz(1.0)
    .with_argmin(CriticalSetSpec::point(vec![0.0; n]).expect("n > 0"), 0.0)
}

/// `Φ(x) = ½(x₁ + x₂ - 1)²`, minimized on the line `x₁ + x₂ = 1`.
pub fn least_squares_line() -> ObjectiveSpec {
    let line = CriticalSetSpec::affine(vec![0.5, 0.5], vec![vec![1.0, -1.0]])
        .and_then(|s| s.with_grid_sampler(0.5))
        .expect("valid line");
    ObjectiveSpec::new(
        "least_squares_line",
        2,
        |x| 0.5 * (x[0] + x[1] - 1.0).powi(2),
        |x, g| {
            let r = x[0] + x[1] - 1.0;
            g[0] = r;
            g[1] = r;
        },
        |_, v, out| {
            let s = v[0] + v[1];
            out[0] = s;
            out[1] = s;
        },
    )
    .with_convex(true)
    .with_gradient_lipschitz(2.0)
    .with_argmin(line, 0.0)
}

/// `Φ(x) = (1 - x₁)² + 100 (x₂ - x₁²)²`; nonconvex, unique critical point `(1, 1)`.
pub fn rosenbrock2() -> ObjectiveSpec {
    ObjectiveSpec::new(
        "rosenbrock2",
        2,
        |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
        |x, g| {
            let s = x[1] - x[0] * x[0];
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * s;
            g[1] = 200.0 * s;
        },
        |x, v, out| {
            let h11 = 2.0 - 400.0 * (x[1] - x[0] * x[0]) + 800.0 * x[0] * x[0];
            let h12 = -400.0 * x[0];
            out[0] = h11 * v[0] + h12 * v[1];
            out[1] = h12 * v[0] + 200.0 * v[1];
        },
    )
    .with_argmin(CriticalSetSpec::point(vec![1.0, 1.0]).expect("valid point"), 0.0)
}

/// `Φ(x) = ½ xᵀ diag(1, 10) x`.
pub fn strongly_convex_aniso() -> ObjectiveSpec {
    ObjectiveSpec::new(
        "strongly_convex_aniso",
        2,
        |x| 0.5 * (x[0] * x[0] + 10.0 * x[1] * x[1]),
        |x, g| {
            g[0] = x[0];
            g[1] = 10.0 * x[1];
        },
        |_, v, out| {
            out[0] = v[0];
            out[1] = 10.0 * v[1];
        },
    )
    .with_convex(true)
    .with_gradient_lipschitz(10.0)
    .with_argmin(CriticalSetSpec::point(vec![0.0, 0.0]).expect("valid point"), 0.0)
}

pub const BUILTIN_OBJECTIVES: [&str; 4] = ["quad_iso", "least_squares_line", "rosenbrock2", "strongly_convex_aniso"];

/// The built-in catalog, with `quad_iso` on `ℝ²`.
pub fn builtin_objectives() -> Vec<ObjectiveSpec> {
    vec![
        quad_iso(2),
        least_squares_line(),
        rosenbrock2(),
        strongly_convex_aniso(),
    ]
}

/// Looks up a built-in objective; `dim` sizes `quad_iso` and must match
/// the fixed dimension of the others.
pub fn builtin_objective(name: &str, dim: usize) -> Result<ObjectiveSpec> {
    let obj = match name {
        "quad_iso" if dim > 0 => quad_iso(dim),
        "quad_iso" => return Err(invalid("quad_iso needs a positive dimension")),
        "least_squares_line" => least_squares_line(),
        "rosenbrock2" => rosenbrock2(),
        "strongly_convex_aniso" => strongly_convex_aniso(),
        other => {
            return Err(invalid(format!(
                "unknown objective '{other}', expected one of {}",
                BUILTIN_OBJECTIVES.join(", ")
            )))
        }
    };
    if obj.dim() != dim {
        return Err(invalid(format!(
            "objective '{name}' has dimension {}, got {dim}",
            obj.dim()
        )));
    }
    Ok(obj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinParams {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Vec<f64>>,
}

impl DinParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        DinParams {
            alpha,
            beta,
            epsilon: 0.0,
            anchor: None,
        }
    }

    /// Upper end of the admissible range `0 < ε < min{2α/3, 2/β}`.
    pub fn epsilon_max(&self) -> f64 {
        (2.0 * self.alpha / 3.0).min(2.0 / self.beta)
    }

    /// `c_ε = min{α - 3ε/2, β - β²ε/2}`.
    pub fn c_epsilon(&self) -> f64 {
        let e = self.epsilon;
        (self.alpha - 1.5 * e).min(self.beta - 0.5 * self.beta * self.beta * e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        if self.epsilon > 0.0 && self.epsilon >= self.epsilon_max() {
            return Err(invalid(format!(
                "epsilon = {} violates 0 < ε < min{{2α/3, 2/β}} = {}",
                self.epsilon,
                self.epsilon_max()
            )));
        }
        Ok(())
    }
}

/// `ẋ = v`, `v̇ = -αv - ∇Φ(x) - β ∇²Φ(x) v` on `y = (x, v) ∈ ℝ²ⁿ`.
pub fn din_system(obj: &ObjectiveSpec, p: &DinParams) -> Result<SystemSpec> {
    p.validate()?;
    let n = obj.dim();
    let (alpha, beta) = (p.alpha, p.beta);
    let o = obj.clone();
    Ok(SystemSpec::new(format!("din:{}", obj.name()), 2 * n, move |y, out| {
        let (x, v) = y.split_at(n);
        let (dx, dv) = out.split_at_mut(n);
        dx.copy_from_slice(v);
        let mut hv = vec![0.0; n];
        o.gradient_into(x, dv);
        o.hvp_into(x, v, &mut hv);
        for i in 0..n {
            dv[i] = -alpha * v[i] - dv[i] - beta * hv[i];
        }
    }))
}

/// `S = {(x, v) : v = 0, x ∈ Argmin Φ}`; for the built-ins this is the set
/// of all equilibria of the DIN system.
pub fn din_critical_set(obj: &ObjectiveSpec) -> Result<CriticalSetSpec> {
    let argmin = obj
        .argmin()
        .ok_or_else(|| invalid(format!("objective '{}' declares no argmin set", obj.name())))?;
    CriticalSetSpec::product(vec![argmin.clone(), CriticalSetSpec::point(vec![0.0; obj.dim()])?])
}

/// DIN energy as a single-function pair with `N1 = α‖v‖²`, `N2 = β‖∇Φ‖²`,
/// plus the raw observables `‖v‖²` and `‖∇Φ(x)‖²`.
#[derive(Clone)]
pub struct DinEnergy {
    pub pair: LyapunovPair,
    pub velocity_sq: ScalarFn,
    pub gradient_sq: ScalarFn,
}

impl fmt::Debug for DinEnergy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DinEnergy")
            .field("pair", &self.pair)
            .finish_non_exhaustive()
    }
}

/// `W = (αβ + 1)Φ(x) + ½‖v + β∇Φ(x)‖²` with `Ẇ = -α‖v‖² - β‖∇Φ(x)‖²`.
pub fn din_energy(obj: &ObjectiveSpec, p: &DinParams) -> Result<DinEnergy> {
    p.validate()?;
    let n = obj.dim();
    let (alpha, beta) = (p.alpha, p.beta);
    let (o1, o2, o3) = (obj.clone(), obj.clone(), obj.clone());
    let w = move |y: &[f64]| {
        let (x, v) = y.split_at(n);
        let g = o1.gradient(x);
        let s: f64 = v.iter().zip(&g).map(|(a, b)| (a + beta * b).powi(2)).sum();
        (alpha * beta + 1.0) * o1.value(x) + 0.5 * s
    };
    let n1 = move |y: &[f64]| alpha * norm_sq(&y[n..]);
    let n2 = move |y: &[f64]| beta * norm_sq(&o2.gradient(&y[..n]));
    let o4 = obj.clone();
    let wdot = move |y: &[f64]| -alpha * norm_sq(&y[n..]) - beta * norm_sq(&o4.gradient(&y[..n]));
    Ok(DinEnergy {
        pair: LyapunovPair::single(w, n1, n2).with_wdot(wdot),
        velocity_sq: Arc::new(move |y: &[f64]| norm_sq(&y[n..])),
        gradient_sq: Arc::new(move |y: &[f64]| norm_sq(&o3.gradient(&y[..n]))),
    })
}

#[derive(Clone, Debug)]
pub struct DinPerturbed {
    /// `W_ε` with `N1 = c_ε‖v‖²`, `N2 = c_ε‖∇Φ‖²` and exact `Ẇ_ε`.
    pub pair: LyapunovPair,
    pub epsilon: f64,
    pub c_epsilon: f64,
    pub anchor: Vec<f64>,
}

/// `W_ε = W + ε(α/2 ‖x - z‖² + ⟨v + β∇Φ(x), x - z⟩)` for a minimizer `z`.
///
/// The anchor is `p.anchor` when set, else the projection of `x0` onto the
/// argmin set. The decay bound `Ẇ_ε <= -c_ε(‖v‖² + ‖∇Φ‖²)` needs convexity.
pub fn din_perturbed_energy(obj: &ObjectiveSpec, p: &DinParams, x0: Option<&[f64]>) -> Result<DinPerturbed> {
    p.validate()?;
    if !(p.epsilon > 0.0) {
        return Err(invalid(format!(
            "perturbed energy needs 0 < ε < min{{2α/3, 2/β}} = {}, got epsilon = {}",
            p.epsilon_max(),
            p.epsilon
        )));
    }
    if !obj.convex() {
        return Err(invalid(format!(
            "objective '{}' is not declared convex; the perturbed energy needs ⟨∇Φ(x), x - z⟩ >= 0",
            obj.name()
        )));
    }
    let n = obj.dim();
    let anchor = match (&p.anchor, x0) {
        (Some(z), _) => z.clone(),
        (None, Some(x0)) => {
            let x = x0
                .get(..n)
                .ok_or_else(|| invalid("initial state is shorter than the objective dimension"))?;
            obj.argmin()
                .and_then(|a| a.project(x))
                .ok_or_else(|| invalid("anchor: objective has no projectable argmin; set params.anchor"))?
        }
        (None, None) => return Err(invalid("anchor: no anchor and no initial state to project")),
    };
    if anchor.len() != n {
        return Err(invalid(format!("anchor has length {}, expected {n}", anchor.len())));
    }
    let gz = norm(&obj.gradient(&anchor));
    if gz > 1e-8 {
        return Err(invalid(format!("anchor is not a minimizer: ‖∇Φ(z)‖ = {gz:e} > 1e-8")));
    }

    let (alpha, beta, eps) = (p.alpha, p.beta, p.epsilon);
    let c_eps = p.c_epsilon();
    let base = din_energy(obj, p)?.pair;
    let (o1, o2, o3) = (obj.clone(), obj.clone(), obj.clone());
    let (z1, z2) = (anchor.clone(), anchor.clone());
    let w = move |y: &[f64]| {
        let (x, v) = y.split_at(n);
        let g = o1.gradient(x);
        let xz = sub(x, &z1);
        let coupling: f64 = v.iter().zip(&g).zip(&xz).map(|((a, b), c)| (a + beta * b) * c).sum();
        base.w(y, 1.0) + eps * (0.5 * alpha * norm_sq(&xz) + coupling)
    };
    let wdot = move |y: &[f64]| {
        let (x, v) = y.split_at(n);
        let g = o2.gradient(x);
        let v2 = norm_sq(v);
        let g2 = norm_sq(&g);
        -alpha * v2 - beta * g2 + eps * (v2 + beta * dot(&g, v) - dot(&g, &sub(x, &z2)))
    };
    let n1 = move |y: &[f64]| c_eps * norm_sq(&y[n..]);
    let n2 = move |y: &[f64]| c_eps * norm_sq(&o3.gradient(&y[..n]));
    Ok(DinPerturbed {
        pair: LyapunovPair::single(w, n1, n2).with_wdot(wdot),
        epsilon: eps,
        c_epsilon: c_eps,
        anchor,
    })
}

/// Data of `min Φ(x)` subject to `Ax = b`, with a chosen saddle point.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualParams {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub x_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub epsilon: f64,
    /// Young parameters `(η₁, η₂, η₃)`.
    pub etas: [f64; 3],
}

pub const DEFAULT_ETAS: [f64; 3] = [0.25, 0.25, 0.25];

impl PrimalDualParams {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, x_star: DVector<f64>, lambda_star: DVector<f64>) -> Self {
        PrimalDualParams {
            a,
            b,
            x_star,
            lambda_star,
            epsilon: 0.0,
            etas: DEFAULT_ETAS,
        }
    }

    pub fn primal_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn dual_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `(a₁, a₂) = (1 + ε - 2εη₁, 1 + ε - 2ε(η₂ + η₃))`.
    pub fn a_coefficients(&self) -> (f64, f64) {
        let e = self.epsilon;
        let [h1, h2, h3] = self.etas;
        (1.0 + e - 2.0 * e * h1, 1.0 + e - 2.0 * e * (h2 + h3))
    }

    pub fn operator_norm(&self) -> f64 {
        self.a.clone().singular_values().max()
    }

    pub fn validate(&self, obj: &ObjectiveSpec) -> Result<()> {
        let (m, n) = self.a.shape();
        if m == 0 || n == 0 {
            return Err(invalid("constraint matrix A must be nonempty"));
        }
        if obj.dim() != n {
            return Err(invalid(format!(
                "A has {n} columns but the objective has dimension {}",
                obj.dim()
            )));
        }
        if self.b.len() != m || self.lambda_star.len() != m || self.x_star.len() != n {
            return Err(invalid(format!(
                "dimension mismatch: A is {m}x{n}, b has {}, x* has {}, λ* has {}",
                self.b.len(),
                self.x_star.len(),
                self.lambda_star.len()
            )));
        }
        if self.etas.iter().any(|h| !(*h > 0.0)) {
            return Err(invalid("Young parameters etas must be positive"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid(format!("epsilon must be nonnegative, got {}", self.epsilon)));
        }
        let (a1, a2) = self.a_coefficients();
        if self.epsilon > 0.0 && !(a1 > 0.0 && a2 > 0.0) {
            return Err(invalid(format!(
                "a1 = {a1}, a2 = {a2} must both be positive; lower epsilon or etas"
            )));
        }
        let stat = DVector::from_vec(obj.gradient(self.x_star.as_slice())) + self.a.transpose() * &self.lambda_star;
        if stat.norm() > 1e-8 {
            return Err(invalid(format!(
                "saddle point is not stationary: ‖∇Φ(x*) + Aᵀλ*‖ = {:e} > 1e-8",
                stat.norm()
            )));
        }
        let feas = &self.a * &self.x_star - &self.b;
        if feas.norm() > 1e-10 {
            return Err(invalid(format!(
                "saddle point is infeasible: ‖Ax* - b‖ = {:e} > 1e-10",
                feas.norm()
            )));
        }
        Ok(())
    }
}

/// `Φ(x) = ½‖x‖²` subject to `x₁ + x₂ = 1`; saddle `((½, ½), -½)`.
pub fn pd_quad_iso_eqcon() -> (ObjectiveSpec, PrimalDualParams) {
    let p = PrimalDualParams::new(
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DVector::from_vec(vec![1.0]),
        DVector::from_vec(vec![0.5, 0.5]),
        DVector::from_vec(vec![-0.5]),
    );
    (quad_iso(2), p)
}

/// Residuals `r = Ax - b` and `g = ∇Φ(x) + Aᵀλ` at a state `(x, λ)`.
struct PdEval {
    obj: ObjectiveSpec,
    a: DMatrix<f64>,
    b: DVector<f64>,
    n: usize,
}

impl PdEval {
    fn new(obj: &ObjectiveSpec, p: &PrimalDualParams) -> Self {
        PdEval {
            obj: obj.clone(),
            a: p.a.clone(),
            b: p.b.clone(),
            n: p.primal_dim(),
        }
    }

    fn residuals(&self, y: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let (x, lam) = y.split_at(self.n);
        let xv = DVector::from_column_slice(x);
        let lv = DVector::from_column_slice(lam);
        let r = &self.a * &xv - &self.b;
        let g = DVector::from_vec(self.obj.gradient(x)) + self.a.transpose() * lv;
        (r, g)
    }
}

/// `ẋ = -∇Φ(x) - Aᵀλ`, `λ̇ = Ax - b` on `(x, λ) ∈ ℝⁿ⁺ᵐ`.
pub fn pd_system(obj: &ObjectiveSpec, p: &PrimalDualParams) -> Result<SystemSpec> {
    p.validate(obj)?;
    let ev = PdEval::new(obj, p);
    let n = p.primal_dim();
    Ok(SystemSpec::new(
        format!("pd:{}", obj.name()),
        n + p.dual_dim(),
        move |y, out| {
            let (r, g) = ev.residuals(y);
            let (dx, dl) = out.split_at_mut(n);
            dx.iter_mut().zip(g.iter()).for_each(|(o, v)| *o = -v);
            dl.copy_from_slice(r.as_slice());
        },
    ))
}

/// The saddle point as a one-point set in `(x, λ)` space.
pub fn pd_critical_set(p: &PrimalDualParams) -> Result<CriticalSetSpec> {
    CriticalSetSpec::point(p.x_star.iter().chain(p.lambda_star.iter()).copied().collect())
}

fn pd_w(ev: &PdEval, phi_star: f64, l_star: &[f64], y: &[f64]) -> f64 {
    let (r, _) = ev.residuals(y);
    let lam = &y[ev.n..];
    ev.obj.value(&y[..ev.n]) - phi_star + 0.5 * r.norm_squared() + 0.5 * norm_sq(&sub(lam, l_star))
}

/// Derivative of `W` along the flow by the chain rule:
/// `Ẇ = -⟨∇Φ(x) + Aᵀ(Ax - b), ∇Φ(x) + Aᵀλ⟩ + ⟨λ - λ*, Ax - b⟩`.
fn pd_wdot(ev: &PdEval, l_star: &[f64], y: &[f64]) -> f64 {
    let (r, g) = ev.residuals(y);
    let (x, lam) = y.split_at(ev.n);
    let inner = DVector::from_vec(ev.obj.gradient(x)) + ev.a.transpose() * &r;
    -inner.dot(&g) + dot(&sub(lam, l_star), r.as_slice())
}

/// `W = Φ(x) - Φ(x*) + ½‖Ax - b‖² + ½‖λ - λ*‖²` with `N1 = ‖Ax - b‖²`,
/// `N2 = ‖∇Φ(x) + Aᵀλ‖²`.
///
/// The attached derivative is the exact chain-rule `∇W · f`, not the
/// closed form `-N1 - N2`. The two differ away from the saddle: at
/// `x = x*, λ = λ* + d` the chain rule gives `-⟨Ax*, d⟩`, which takes both
/// signs. The decay check therefore reports what the flow actually does.
pub fn pd_energy(obj: &ObjectiveSpec, p: &PrimalDualParams) -> Result<LyapunovPair> {
    p.validate(obj)?;
    let ev = Arc::new(PdEval::new(obj, p));
    let phi_star = obj.value(p.x_star.as_slice());
    let ls: Vec<f64> = p.lambda_star.iter().copied().collect();
    let ls4 = ls.clone();
    let (e1, e2, e3, e4) = (ev.clone(), ev.clone(), ev.clone(), ev);
    Ok(LyapunovPair::single(
        move |y| pd_w(&e1, phi_star, &ls, y),
        move |y| e2.residuals(y).0.norm_squared(),
        move |y| e3.residuals(y).1.norm_squared(),
    )
    .with_wdot(move |y| pd_wdot(&e4, &ls4, y)))
}

/// Sublevel constants estimated by sampling `{W <= W₀}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdConstants {
    pub w0: f64,
    pub samples: usize,
    pub operator_norm: f64,
    pub gradient_lipschitz_estimate: f64,
    /// Max of `‖x - x*‖² / W` over the samples.
    pub c_x: f64,
    /// Max of `W / (‖Ax - b‖² + ‖∇Φ + Aᵀλ‖²)` over the samples.
    pub kappa: f64,
    pub c0: f64,
    /// Smallest `W` among the samples; negative values mean `W` is not a
    /// nonnegative functional on this instance.
    pub min_w: f64,
    pub a1: f64,
    pub a2: f64,
    /// Largest `ε` with `ε c₀ κ <= ½ min{a₁, a₂}`.
    pub max_epsilon: f64,
}

#[derive(Clone)]
pub enum PdPerturbedOutcome {
    /// `W_ε` with `N1 = c₁‖Ax - b‖²`, `N2 = c₂‖∇Φ + Aᵀλ‖²` and exact `Ẇ_ε`.
    Certified {
        pair: LyapunovPair,
        c1: f64,
        c2: f64,
        constants: PdConstants,
    },
    NeedsSmallerEpsilon {
        epsilon: f64,
        constants: PdConstants,
    },
}

impl fmt::Debug for PdPerturbedOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PdPerturbedOutcome::Certified { c1, c2, constants, .. } => f
                .debug_struct("Certified")
                .field("c1", c1)
                .field("c2", c2)
                .field("constants", constants)
                .finish_non_exhaustive(),
            PdPerturbedOutcome::NeedsSmallerEpsilon { epsilon, constants } => f
                .debug_struct("NeedsSmallerEpsilon")
                .field("epsilon", epsilon)
                .field("constants", constants)
                .finish(),
        }
    }
}

pub const PD_MIN_SAMPLES: usize = 10_000;

/// Radius along `dir` at which the convex sublevel set `{W <= w0}` ends.
fn boundary_radius(w: &dyn Fn(&[f64]) -> f64, center: &[f64], dir: &[f64], w0: f64) -> Result<f64> {
    let at = |s: f64| -> Vec<f64> { center.iter().zip(dir).map(|(c, d)| c + s * d).collect() };
    let mut hi = 1.0;
    while w(&at(hi)) <= w0 {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(invalid(format!("sublevel set {{W <= {w0}}} appears unbounded")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if w(&at(mid)) <= w0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Estimates the sublevel constants (`C_x`, `κ`, `c₀`) for `W_ε` by
/// rejection sampling `{W <= w0}` and returns the certificate when
/// `ε c₀ κ <= ½ min{a₁, a₂}`.
///
/// The sampling box comes from ray bisection, which is exact for the convex
/// sublevel sets arising from convex `Φ`; all constants are estimates.
pub fn pd_perturbed_energy(
    obj: &ObjectiveSpec,
    p: &PrimalDualParams,
    w0: f64,
    seed: u64,
) -> Result<PdPerturbedOutcome> {
    p.validate(obj)?;
    let lip = obj
        .gradient_lipschitz_estimate()
        .ok_or_else(|| invalid(format!("objective '{}' needs gradient_lipschitz_estimate", obj.name())))?;
    if !(w0 > 0.0 && w0.is_finite()) {
        return Err(invalid(format!("sublevel value W0 must be positive, got {w0}")));
    }
    let ev = Arc::new(PdEval::new(obj, p));
    let (n, m) = (p.primal_dim(), p.dual_dim());
    let dim = n + m;
    let phi_star = obj.value(p.x_star.as_slice());
    let xs: Vec<f64> = p.x_star.iter().copied().collect();
    let ls: Vec<f64> = p.lambda_star.iter().copied().collect();
    let center: Vec<f64> = xs.iter().chain(&ls).copied().collect();
    let w = {
        let (ev, ls) = (ev.clone(), ls.clone());
        move |y: &[f64]| pd_w(&ev, phi_star, &ls, y)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut half = vec![0.0f64; dim];
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..dim {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[i] = s;
            dirs.push(e);
        }
    }
    for _ in 0..2000 {
        let d = ball_point(&mut rng, dim);
        let r = norm(&d);
        if r > 1e-3 {
            dirs.push(d.iter().map(|a| a / r).collect());
        }
    }
    for d in &dirs {
        let rad = boundary_radius(&w, &center, d, w0)?;
        for (h, di) in half.iter_mut().zip(d) {
            *h = h.max(rad * di.abs());
        }
    }
    half.iter_mut().for_each(|h| *h *= 1.1);

    let mut c_x: f64 = 0.0;
    let mut kappa: f64 = 0.0;
    let mut min_w = f64::INFINITY;
    let mut accepted = 0;
    let mut attempts: u64 = 0;
    while accepted < PD_MIN_SAMPLES {
        attempts += 1;
        if attempts > 10_000_000 {
            return Err(Error::NoCertificate(format!(
                "rejection sampling accepted only {accepted} states from {{W <= {w0}}}"
            )));
        }
        let y: Vec<f64> = center
            .iter()
            .zip(&half)
            .map(|(c, h)| c + rng.random_range(-1.0..=1.0) * h)
            .collect();
        let wy = w(&y);
        if wy > w0 {
            continue;
        }
        accepted += 1;
        min_w = min_w.min(wy);
        if wy > 1e-300 {
            c_x = c_x.max(norm_sq(&sub(&y[..n], &xs)) / wy);
            let (r, g) = ev.residuals(&y);
            let nsum = r.norm_squared() + g.norm_squared();
            if nsum > 0.0 {
                kappa = kappa.max(wy / nsum);
            }
        }
    }

    let na = p.operator_norm();
    let [h1, h2, h3] = p.etas;
    let c0 = (na * na / (8.0 * h1) + lip * lip / (8.0 * h3)) * c_x + na * na / (4.0 * h2);
    let (a1, a2) = p.a_coefficients();
    let s = (2.0 * h1).max(2.0 * (h2 + h3));
    // min{a₁, a₂} = 1 + ε(1 - s), so the condition is ε(c₀κ - (1 - s)/2) <= ½.
    let denom = c0 * kappa - 0.5 * (1.0 - s);
    let mut max_epsilon = if denom > 0.0 { 0.5 / denom } else { f64::INFINITY };
    if s > 1.0 {
        // a₁, a₂ > 0 also requires ε < 1/(s - 1).
        max_epsilon = max_epsilon.min(1.0 / (s - 1.0));
    }
    let constants = PdConstants {
        w0,
        samples: accepted,
        operator_norm: na,
        gradient_lipschitz_estimate: lip,
        c_x,
        kappa,
        c0,
        min_w,
        a1,
        a2,
        max_epsilon: if max_epsilon.is_finite() { max_epsilon } else { f64::MAX },
    };
    let eps = p.epsilon;
    if eps * c0 * kappa > 0.5 * a1.min(a2) * (1.0 + 1e-12) {
        return Ok(PdPerturbedOutcome::NeedsSmallerEpsilon {
            epsilon: eps,
            constants,
        });
    }
    let c1 = a1 - eps * c0 * kappa;
    let c2 = a2 - eps * c0 * kappa;

    let pair = pd_perturbed_pair(obj, p, c1, c2);
    Ok(PdPerturbedOutcome::Certified {
        pair,
        c1,
        c2,
        constants,
    })
}

/// `W_ε = W + ε(⟨x - x*, ∇Φ + Aᵀλ⟩ - ⟨λ - λ*, Ax - b⟩)` with its exact
/// chain-rule derivative along the flow and weighted observables `c₁N1`, `c₂N2`.
fn pd_perturbed_pair(obj: &ObjectiveSpec, p: &PrimalDualParams, c1: f64, c2: f64) -> LyapunovPair {
    let eps = p.epsilon;
    let n = p.primal_dim();
    let ev = Arc::new(PdEval::new(obj, p));
    let phi_star = obj.value(p.x_star.as_slice());
    let xs: Vec<f64> = p.x_star.iter().copied().collect();
    let ls: Vec<f64> = p.lambda_star.iter().copied().collect();
    let (e1, e2, e3, e4) = (ev.clone(), ev.clone(), ev.clone(), ev);
    let (xs1, ls1, xs2, ls2) = (xs.clone(), ls.clone(), xs, ls);
    let w = move |y: &[f64]| {
        let (r, g) = e1.residuals(y);
        let (x, lam) = y.split_at(n);
        let skew = dot(&sub(x, &xs1), g.as_slice()) - dot(&sub(lam, &ls1), r.as_slice());
        pd_w(&e1, phi_star, &ls1, y) + eps * skew
    };
    let wdot = move |y: &[f64]| {
        let (r, g) = e4.residuals(y);
        let (x, lam) = y.split_at(n);
        // ẋ = -g, λ̇ = r
        let xdot: Vec<f64> = g.iter().map(|v| -v).collect();
        let hx = DVector::from_vec(e4.obj.hvp(x, &xdot));
        let d_inner = hx + e4.a.transpose() * &r;
        let d1 = -g.norm_squared() + dot(&sub(x, &xs2), d_inner.as_slice());
        let axdot = &e4.a * DVector::from_vec(xdot);
        let d2 = r.norm_squared() + dot(&sub(lam, &ls2), axdot.as_slice());
        pd_wdot(&e4, &ls2, y) + eps * (d1 - d2)
    };
    LyapunovPair::single(
        w,
        move |y| c1 * e2.residuals(y).0.norm_squared(),
        move |y| c2 * e3.residuals(y).1.norm_squared(),
    )
    .with_wdot(wdot)
}

/// Built-in system ids accepted by scenario files.
pub const BUILTIN_SYSTEMS: [&str; 5] = [
    "din:quad_iso",
    "din:least_squares_line",
    "din:rosenbrock2",
    "din:strongly_convex_aniso",
    "pd:quad_iso_eqcon",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certificates::{optimal_delta, verify_strict_decay, SlopeBound};
    use crate::dynamics::{integrate, IntegratorConfig};
    use proptest::prelude::*;

    #[test]
    fn builtin_derivatives_match_finite_differences() {
        for obj in builtin_objectives() {
            let c = obj.check_derivatives(100, 7);
            assert!(c.pass, "{}: {c:?}", obj.name());
        }
    }

    #[test]
    fn builtin_gradient_examples() {
        assert_eq!(quad_iso(2).gradient(&[2.0, -1.0]), vec![2.0, -1.0]);
        assert_eq!(least_squares_line().gradient(&[1.0, 1.0]), vec![1.0, 1.0]);
        assert_eq!(rosenbrock2().gradient(&[1.0, 1.0]), vec![0.0, 0.0]);
        assert!(builtin_objective("rosenbrock2", 3).is_err());
        assert!(builtin_objective("nope", 2).is_err());
        assert_eq!(builtin_objective("quad_iso", 5).unwrap().dim(), 5);
    }

    #[test]
    fn din_field_examples() {
        let sys = din_system(&quad_iso(1), &DinParams::new(1.0, 1.0)).unwrap();
        assert_eq!(sys.eval(&[1.0, 0.0]), vec![0.0, -1.0]);
        assert_eq!(sys.eval(&[0.0, 1.0]), vec![1.0, -2.0]);
        assert_eq!(sys.eval(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert!(din_system(&quad_iso(1), &DinParams::new(0.0, 1.0)).is_err());
    }

    #[test]
    fn din_energy_examples() {
        let e = din_energy(&quad_iso(1), &DinParams::new(1.0, 1.0)).unwrap();
        assert_eq!(e.pair.w(&[1.0, 0.0], 1.0), 1.5);
        assert_eq!(e.pair.wdot(&[1.0, 0.0], 1.0), Some(-1.0));
        assert_eq!(e.pair.w(&[0.0, 1.0], 1.0), 0.5);
        assert_eq!(e.pair.wdot(&[0.0, 1.0], 1.0), Some(-1.0));
        assert_eq!(e.pair.w(&[0.0, 0.0], 1.0), 0.0);
        assert_eq!((e.velocity_sq)(&[3.0, 2.0]), 4.0);
        assert_eq!((e.gradient_sq)(&[3.0, 2.0]), 9.0);
    }

    #[test]
    fn din_epsilon_range_and_c_epsilon() {
        let mut p = DinParams::new(1.0, 1.0);
        assert!((p.epsilon_max() - 2.0 / 3.0).abs() < 1e-15);
        p.epsilon = 0.5;
        assert_eq!(p.c_epsilon(), 0.25);
        let mut q = DinParams::new(3.0, 0.5);
        assert_eq!(q.epsilon_max(), 2.0);
        q.epsilon = 1.0;
        assert_eq!(q.c_epsilon(), 0.375);
        p.epsilon = 1.0;
        let msg = p.validate().unwrap_err().to_string();
        assert!(msg.contains("0 < ε < min{2α/3, 2/β}"), "{msg}");
        p.epsilon = 0.0;
        assert_eq!(p.c_epsilon(), 1.0);
    }

    #[test]
    fn din_perturbed_errors() {
        let mut p = DinParams::new(1.0, 1.0);
        p.epsilon = 0.3;
        assert!(din_perturbed_energy(&rosenbrock2(), &p, Some(&[0.0; 4])).is_err());
        p.anchor = Some(vec![0.3, 0.3]);
        assert!(din_perturbed_energy(&least_squares_line(), &p, None).is_err());
        p.anchor = None;
        let d = din_perturbed_energy(&least_squares_line(), &p, Some(&[1.0, 1.0, 0.0, 0.0])).unwrap();
        assert!((d.anchor[0] - 0.5).abs() < 1e-15 && (d.anchor[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn din_perturbed_decays_along_trajectories() {
        let mut p = DinParams::new(1.0, 1.0);
        p.epsilon = 0.5;
        for obj in [quad_iso(2), least_squares_line(), strongly_convex_aniso()] {
            let x0 = [1.0, -0.5, 0.0, 0.0];
            let d = din_perturbed_energy(&obj, &p, Some(&x0)).unwrap();
            let sys = din_system(&obj, &p).unwrap();
            let traj = integrate(&sys, &x0, &IntegratorConfig::with_horizon(20.0)).unwrap();
            let cert = optimal_delta(&SlopeBound::exact(0.0)).unwrap();
            let r = verify_strict_decay(&traj, &d.pair, &cert, None).unwrap();
            assert!(r.passed(), "{}: {}", obj.name(), r.max_violation);
            assert!(r.wdot_crosscheck.unwrap().pass);
        }
    }

    #[test]
    fn pd_examples() {
        let (obj, p) = pd_quad_iso_eqcon();
        let sys = pd_system(&obj, &p).unwrap();
        assert_eq!(sys.eval(&[1.0, 0.0, 0.0]), vec![-1.0, 0.0, 0.0]);
        assert!(sys.eval(&[0.5, 0.5, -0.5]).iter().all(|v| v.abs() < 1e-15));
        let w = pd_energy(&obj, &p).unwrap();
        assert!((w.w(&[1.0, 0.0, 0.0], 1.0) - 0.375).abs() < 1e-15);
        assert_eq!(w.n1(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(w.n2(&[1.0, 0.0, 0.0]), 1.0);
        assert_eq!((w.n1(&[0.0, 0.0, 0.0]), w.n2(&[0.0, 0.0, 0.0])), (1.0, 0.0));
        // The closed form -N1 - N2 would give -1; the chain rule gives -0.5.
        assert_eq!(w.wdot(&[0.0, 0.0, 0.0], 1.0), Some(-0.5));
        assert!(w.wdot(&[0.5, 0.5, -0.5], 1.0).unwrap().abs() < 1e-15);
        // At x = x*, λ = λ* + d the derivative is -d (x*₁ + x*₂) = -d.
        assert!((w.wdot(&[0.5, 0.5, -0.7], 1.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(w.w(&[0.5, 0.5, -0.5], 1.0).abs() < 1e-15);

        let mut bad = p.clone();
        bad.lambda_star = DVector::from_vec(vec![0.0]);
        assert!(pd_system(&obj, &bad).is_err());
        assert!(pd_system(&quad_iso(3), &p).is_err());
    }

    #[test]
    fn pd_perturbed_outcomes() {
        let (obj, mut p) = pd_quad_iso_eqcon();
        assert!((p.operator_norm() - 2f64.sqrt()).abs() < 1e-12);
        let out = pd_perturbed_energy(&obj, &p, 1.0, 3).unwrap();
        let PdPerturbedOutcome::Certified { c1, c2, constants, .. } = out else {
            panic!("epsilon = 0 must certify");
        };
        assert_eq!((c1, c2), (1.0, 1.0));
        assert!(constants.samples >= PD_MIN_SAMPLES);
        assert!(constants.kappa > 0.0 && constants.c_x > 0.0);

        p.epsilon = 0.9 * constants.max_epsilon;
        let out = pd_perturbed_energy(&obj, &p, 1.0, 3).unwrap();
        let PdPerturbedOutcome::Certified { pair, c1, c2, .. } = out else {
            panic!("admissible epsilon must certify");
        };
        assert!(c1 > 0.0 && c2 > 0.0);
        let sys = pd_system(&obj, &p).unwrap();
        let traj = integrate(&sys, &[1.0, 0.0, 0.0], &IntegratorConfig::with_horizon(20.0)).unwrap();
        let r = verify_strict_decay(&traj, &pair, &optimal_delta(&SlopeBound::exact(0.0)).unwrap(), None).unwrap();
        assert!(r.wdot_crosscheck.unwrap().pass);

        p.epsilon = 0.9;
        let (a1, a2) = p.a_coefficients();
        assert!(a1 > 0.0 && a2 > 0.0);
        let out = pd_perturbed_energy(&obj, &p, 1.0, 3).unwrap();
        assert!(matches!(out, PdPerturbedOutcome::NeedsSmallerEpsilon { .. }), "{out:?}");

        let no_lip = ObjectiveSpec::new(
            "q",
            2,
            |x| 0.5 * norm_sq(x),
            |x, g| g.copy_from_slice(x),
            |_, v, o| o.copy_from_slice(v),
        );
        assert!(pd_perturbed_energy(&no_lip, &pd_quad_iso_eqcon().1, 1.0, 3).is_err());
        assert!(pd_perturbed_energy(&obj, &pd_quad_iso_eqcon().1, 0.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn din_w_eps_close_to_w_in_box(
            e in 0.0f64..0.66,
            y in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            // With z = 0 and α = β = 1: |W_ε - W| <= ε(½‖x‖² + (‖v‖ + ‖x‖)‖x‖) <= ε · 2.5 R² for R = √2.
            let obj = quad_iso(2);
            let mut p = DinParams::new(1.0, 1.0);
            let base = din_energy(&obj, &p).unwrap().pair;
            prop_assume!(e > 1e-6);
            p.epsilon = e;
            p.anchor = Some(vec![0.0, 0.0]);
            let pert = din_perturbed_energy(&obj, &p, None).unwrap().pair;
            let diff = (pert.w(&y, 1.0) - base.w(&y, 1.0)).abs();
            prop_assert!(diff <= e * 2.5 * 2.0 + 1e-12);
        }

        #[test]
        fn din_identity_holds_pointwise(
            y in proptest::collection::vec(-2.0f64..2.0, 4),
            alpha in 0.1f64..3.0, beta in 0.1f64..3.0,
        ) {
            // Analytic Ẇ equals ∇W · f computed by central differences.
            let obj = rosenbrock2();
            let p = DinParams::new(alpha, beta);
            let e = din_energy(&obj, &p).unwrap();
            let f = din_system(&obj, &p).unwrap().eval(&y);
            let h = 1e-6;
            let yp: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a + h * b).collect();
            let ym: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - h * b).collect();
            let fd = (e.pair.w(&yp, 1.0) - e.pair.w(&ym, 1.0)) / (2.0 * h);
            let an = e.pair.wdot(&y, 1.0).unwrap();
            prop_assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "fd {} analytic {}", fd, an);
        }

        #[test]
        fn pd_chain_rule_matches_finite_differences(y in proptest::collection::vec(-2.0f64..2.0, 3)) {
            let (obj, p) = pd_quad_iso_eqcon();
            let pair = pd_energy(&obj, &p).unwrap();
            let f = pd_system(&obj, &p).unwrap().eval(&y);
            let h = 1e-6;
            let yp: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a + h * b).collect();
            let ym: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - h * b).collect();
            let fd = (pair.w(&yp, 1.0) - pair.w(&ym, 1.0)) / (2.0 * h);
            let an = pair.wdot(&y, 1.0).unwrap();
            prop_assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()));
        }

        #[test]
        fn pd_perturbed_identity_holds_pointwise(
            y in proptest::collection::vec(-2.0f64..2.0, 3),
            e in 0.0f64..0.5,
        ) {
            let (obj, mut p) = pd_quad_iso_eqcon();
            p.epsilon = e;
            let pair = pd_perturbed_pair(&obj, &p, 1.0, 1.0);
            let f = pd_system(&obj, &p).unwrap().eval(&y);
            let h = 1e-6;
            let yp: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a + h * b).collect();
            let ym: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - h * b).collect();
            let fd = (pair.w(&yp, 1.0) - pair.w(&ym, 1.0)) / (2.0 * h);
            let an = pair.wdot(&y, 1.0).unwrap();
            prop_assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()));
        }
    }
}
