//! Control problems: coefficients with derivatives, delay measures, control sets, histories,
//! and the built-in scenarios.

use std::fmt;
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{Atom, DelayMeasure, Density, NodeWeights};
use crate::paths::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    First,
    Second,
}

/// Value and `(x, y)` derivatives of a vector-valued coefficient.
///
/// Output `k`, variables `a, b`: `dx[k*d + a]`, `dxx[(k*d + a)*d + b]`, and `dxy[(k*d + a)*d + b]`
/// is `∂²/∂x_a∂y_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub n_out: usize,
    pub dim: usize,
    pub value: Vec<f64>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub dxx: Vec<f64>,
    pub dxy: Vec<f64>,
    pub dyy: Vec<f64>,
}

impl Jet {
    pub fn new(n_out: usize, dim: usize) -> Self {
        Self {
            n_out,
            dim,
            value: vec![0.0; n_out],
            dx: vec![0.0; n_out * dim],
            dy: vec![0.0; n_out * dim],
            dxx: vec![0.0; n_out * dim * dim],
            dxy: vec![0.0; n_out * dim * dim],
            dyy: vec![0.0; n_out * dim * dim],
        }
    }

    pub fn reset(&mut self, order: Order) {
        self.value.fill(0.0);
        if order >= Order::First {
            self.dx.fill(0.0);
            self.dy.fill(0.0);
        }
        if order >= Order::Second {
            self.dxx.fill(0.0);
            self.dxy.fill(0.0);
            self.dyy.fill(0.0);
        }
    }

    #[inline]
    pub fn d1(&self, k: usize, a: usize) -> usize {
        k * self.dim + a
    }

    #[inline]
    pub fn d2(&self, k: usize, a: usize, b: usize) -> usize {
        (k * self.dim + a) * self.dim + b
    }

    pub fn is_finite(&self, order: Order) -> bool {
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
        ok(&self.value)
            && (order < Order::First || (ok(&self.dx) && ok(&self.dy)))
            && (order < Order::Second || (ok(&self.dxx) && ok(&self.dxy) && ok(&self.dyy)))
    }
}

/// A coefficient `ψ(t, x, y, u)` with derivatives in `(x, y)`, where `y` is the past integral.
pub trait Coefficient: Send + Sync {
    /// Fills `jet` (already zeroed up to `order`) with the value and requested derivatives.
    fn eval(&self, t: f64, x: &[f64], y: &[f64], u: &[f64], order: Order, jet: &mut Jet);
}

impl<F> Coefficient for F
where
    F: Fn(f64, &[f64], &[f64], &[f64], Order, &mut Jet) + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64], y: &[f64], u: &[f64], order: Order, jet: &mut Jet) {
        self(t, x, y, u, order, jet)
    }
}

/// Initial history `x₁` on `[-d, 0]`.
#[derive(Clone)]
pub enum History {
    Constant(Vec<f64>),
    Function(Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>),
}

impl History {
    pub fn at(&self, theta: f64) -> Vec<f64> {
        match self {
            History::Constant(v) => v.clone(),
            History::Function(f) => f(theta),
        }
    }
}

impl fmt::Debug for History {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            History::Constant(v) => write!(f, "Constant({v:?})"),
            History::Function(_) => write!(f, "Function"),
        }
    }
}

/// Drift, diffusion and costs together with their delay measures.
///
/// The diffusion has `d·m` outputs, entry `(j, i)` (state component `j`, noise `i`) at
/// index `j*m + i`. The terminal cost is evaluated with `t = T` and an empty control.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub delay: f64,
    pub drift: Arc<dyn Coefficient>,
    pub diffusion: Arc<dyn Coefficient>,
    pub running_cost: Arc<dyn Coefficient>,
    pub terminal_cost: Arc<dyn Coefficient>,
    pub mu_b: DelayMeasure,
    pub mu_sigma: DelayMeasure,
    pub mu_ell: DelayMeasure,
    pub mu_h: DelayMeasure,
    pub control_set: Vec<Vec<f64>>,
    pub history: History,
    /// Human-readable statement of the cost sign convention.
    pub convention: String,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dims", &(self.state_dim, self.noise_dim, self.control_dim))
            .field("horizon", &self.horizon)
            .field("delay", &self.delay)
            .field("controls", &self.control_set.len())
            .finish()
    }
}

/// Node weights of the four delay measures on one grid.
#[derive(Debug, Clone)]
pub struct MeasureWeights {
    pub b: NodeWeights,
    pub sigma: NodeWeights,
    pub ell: NodeWeights,
    pub h: NodeWeights,
}

impl ProblemSpec {
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon - self.horizon).abs() > 1e-12 * self.horizon.max(1.0)
            || (grid.delay - self.delay).abs() > 1e-12 * self.delay.max(1.0)
        {
            return Err(Error::Consistency(format!(
                "grid (T={}, d={}) does not match problem (T={}, d={})",
                grid.horizon, grid.delay, self.horizon, self.delay
            )));
        }
        Ok(())
    }

    pub fn weights(&self, grid: &TimeGrid) -> Result<MeasureWeights> {
        self.check_grid(grid)?;
        Ok(MeasureWeights {
            b: self.mu_b.weights(grid.lag)?,
            sigma: self.mu_sigma.weights(grid.lag)?,
            ell: self.mu_ell.weights(grid.lag)?,
            h: self.mu_h.weights(grid.lag)?,
        })
    }

    pub fn new_jets(&self) -> Jets {
        Jets {
            b: Jet::new(self.state_dim, self.state_dim),
            sigma: Jet::new(self.state_dim * self.noise_dim, self.state_dim),
            ell: Jet::new(1, self.state_dim),
            h: Jet::new(1, self.state_dim),
        }
    }

    pub fn control_index(&self, v: &[f64]) -> Option<usize> {
        self.control_set
            .iter()
            .position(|c| c.len() == v.len() && c.iter().zip(v).all(|(a, b)| (a - b).abs() < 1e-12))
    }

    /// Same problem with every measure replaced by its hat-kernel mollification.
    pub fn mollified(&self, n: usize) -> Result<ProblemSpec> {
        use crate::measures::mollify;
        let m = |mu: &DelayMeasure| -> Result<DelayMeasure> {
            if mu.is_zero() {
                Ok(mu.clone())
            } else {
                mollify(mu, n)
            }
        };
        let mut out = self.clone();
        out.mu_b = m(&self.mu_b)?;
        out.mu_sigma = m(&self.mu_sigma)?;
        out.mu_ell = m(&self.mu_ell)?;
        out.mu_h = m(&self.mu_h)?;
        out.name = format!("{}-mollified-{n}", self.name);
        Ok(out)
    }

    pub fn has_atoms(&self) -> bool {
        self.mu_b.has_atoms() || self.mu_sigma.has_atoms() || self.mu_ell.has_atoms() || self.mu_h.has_atoms()
    }
}

/// Reusable scratch jets for the four coefficients.
#[derive(Debug, Clone)]
pub struct Jets {
    pub b: Jet,
    pub sigma: Jet,
    pub ell: Jet,
    pub h: Jet,
}

/// Control process on the grid, stored as indices into the control set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    pub steps: usize,
    /// `None` when the control is the same on every path.
    pub paths: Option<usize>,
    pub index: Vec<u32>,
    /// The construction used only information available at each time.
    pub adapted: bool,
}

impl ControlPath {
    pub fn constant(steps: usize, idx: usize) -> Self {
        Self {
            steps,
            paths: None,
            index: vec![idx as u32; steps],
            adapted: true,
        }
    }

    pub fn schedule(index: Vec<usize>) -> Self {
        Self {
            steps: index.len(),
            paths: None,
            index: index.into_iter().map(|i| i as u32).collect(),
            adapted: true,
        }
    }

    /// Deterministic control `t ↦ f(t)` on the grid; every value must belong to the control set.
    pub fn from_fn(spec: &ProblemSpec, grid: &TimeGrid, f: impl Fn(f64) -> Vec<f64>) -> Result<Self> {
        let mut idx = Vec::with_capacity(grid.steps);
        for i in 0..grid.steps {
            let t = grid.time(i as isize);
            let v = f(t);
            let k = spec.control_index(&v).ok_or_else(|| {
                Error::Domain(format!("control value {v:?} at t = {t} is not in the control set"))
            })?;
            idx.push(k);
        }
        Ok(Self::schedule(idx))
    }

    #[inline]
    pub fn at(&self, path: usize, step: usize) -> usize {
        let step = step.min(self.steps - 1);
        match self.paths {
            None => self.index[step] as usize,
            Some(_) => self.index[path * self.steps + step] as usize,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.paths.is_none()
    }

    pub fn validate(&self, spec: &ProblemSpec, grid: &TimeGrid) -> Result<()> {
        if self.steps != grid.steps {
            return Err(Error::Shape(format!(
                "control has {} steps, grid has {}",
                self.steps, grid.steps
            )));
        }
        if let Some(&bad) = self.index.iter().find(|&&i| i as usize >= spec.control_set.len()) {
            return Err(Error::Domain(format!("control index {bad} outside the control set")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------------------------
// Hypothesis validation

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientCheck {
    pub name: String,
    pub lipschitz_u: f64,
    pub bound_at_origin: f64,
    pub max_first_derivative: f64,
    pub residual_dx: f64,
    pub residual_dy: f64,
    pub residual_dxx: f64,
    pub residual_dxy: f64,
    pub residual_dyy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisReport {
    pub samples: usize,
    pub tolerance: f64,
    pub coefficients: Vec<CoefficientCheck>,
    pub violations: Vec<String>,
}

impl HypothesisReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const DERIVATIVE_TOL: f64 = 1e-4;

/// Samples points in `[0,T] × [-R,R]^d × [-R,R]^d × U` and checks Lipschitz-in-u behaviour,
/// boundedness at the origin, and the supplied derivatives against central differences.
pub fn validate_hypotheses(spec: &ProblemSpec, budget: usize) -> Result<HypothesisReport> {
    validate_hypotheses_in(spec, budget, 2.0, 0x5eed)
}

pub fn validate_hypotheses_in(
    spec: &ProblemSpec,
    budget: usize,
    radius: f64,
    seed: u64,
) -> Result<HypothesisReport> {
    if budget == 0 {
        return Err(Error::Domain("validation needs at least one sample point".into()));
    }
    let d = spec.state_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unif = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let empty: Vec<f64> = vec![];
    let coefs: [(&str, &Arc<dyn Coefficient>, usize, bool); 4] = [
        ("drift", &spec.drift, d, true),
        ("diffusion", &spec.diffusion, d * spec.noise_dim, true),
        ("running_cost", &spec.running_cost, 1, true),
        ("terminal_cost", &spec.terminal_cost, 1, false),
    ];
    let mut checks = vec![];
    let mut violations = vec![];
    for (name, coef, n_out, uses_u) in coefs {
        let mut check = CoefficientCheck {
            name: name.to_string(),
            lipschitz_u: 0.0,
            bound_at_origin: 0.0,
            max_first_derivative: 0.0,
            residual_dx: 0.0,
            residual_dy: 0.0,
            residual_dxx: 0.0,
            residual_dxy: 0.0,
            residual_dyy: 0.0,
        };
        let mut jet = Jet::new(n_out, d);
        let mut jp = Jet::new(n_out, d);
        let mut jm = Jet::new(n_out, d);
        let controls: Vec<&Vec<f64>> = if uses_u {
            spec.control_set.iter().collect()
        } else {
            vec![&empty]
        };
        let zero = vec![0.0; d];
        for u in &controls {
            let t = if uses_u { 0.0 } else { spec.horizon };
            eval_checked(coef.as_ref(), name, t, &zero, &zero, u, Order::Value, &mut jet)?;
            for v in &jet.value {
                check.bound_at_origin = check.bound_at_origin.max(v.abs());
            }
        }
        for _ in 0..budget {
            let t = if uses_u { unif() * spec.horizon } else { spec.horizon };
            let x: Vec<f64> = (0..d).map(|_| (2.0 * unif() - 1.0) * radius).collect();
            let y: Vec<f64> = (0..d).map(|_| (2.0 * unif() - 1.0) * radius).collect();
            let ui = (unif() * controls.len() as f64) as usize % controls.len();
            let u = controls[ui];
            eval_checked(coef.as_ref(), name, t, &x, &y, u, Order::Second, &mut jet)?;
            for v in jet.dx.iter().chain(&jet.dy) {
                check.max_first_derivative = check.max_first_derivative.max(v.abs());
            }
            if controls.len() > 1 {
                let uj = (ui + 1 + (unif() * (controls.len() - 1) as f64) as usize) % controls.len();
                let u2 = controls[uj];
                let du: f64 = u.iter().zip(u2.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if du > 0.0 {
                    eval_checked(coef.as_ref(), name, t, &x, &y, u2, Order::Value, &mut jp)?;
                    let dv: f64 = jet
                        .value
                        .iter()
                        .zip(&jp.value)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    check.lipschitz_u = check.lipschitz_u.max(dv / du);
                }
            }
            let h = 1e-5;
            for a in 0..d {
                for (which, base) in [(0usize, &x), (1usize, &y)] {
                    let mut xp = x.clone();
                    let mut yp = y.clone();
                    let mut xm = x.clone();
                    let mut ym = y.clone();
                    if which == 0 {
                        xp[a] += h;
                        xm[a] -= h;
                    } else {
                        yp[a] += h;
                        ym[a] -= h;
                    }
                    let _ = base;
                    eval_checked(coef.as_ref(), name, t, &xp, &yp, u, Order::First, &mut jp)?;
                    eval_checked(coef.as_ref(), name, t, &xm, &ym, u, Order::First, &mut jm)?;
                    for k in 0..n_out {
                        let fd = (jp.value[k] - jm.value[k]) / (2.0 * h);
                        let supplied = if which == 0 { jet.dx[jet.d1(k, a)] } else { jet.dy[jet.d1(k, a)] };
                        let r = (fd - supplied).abs() / supplied.abs().max(1.0);
                        if which == 0 {
                            check.residual_dx = check.residual_dx.max(r);
                        } else {
                            check.residual_dy = check.residual_dy.max(r);
                        }
                        for b in 0..d {
                            // ∂/∂(which)_a of the first derivatives.
                            let fdx = (jp.dx[jp.d1(k, b)] - jm.dx[jm.d1(k, b)]) / (2.0 * h);
                            let fdy = (jp.dy[jp.d1(k, b)] - jm.dy[jm.d1(k, b)]) / (2.0 * h);
                            if which == 0 {
                                let s = jet.dxx[jet.d2(k, a, b)];
                                check.residual_dxx = check.residual_dxx.max((fdx - s).abs() / s.abs().max(1.0));
                                let s = jet.dxy[jet.d2(k, a, b)];
                                check.residual_dxy = check.residual_dxy.max((fdy - s).abs() / s.abs().max(1.0));
                            } else {
                                let s = jet.dyy[jet.d2(k, a, b)];
                                check.residual_dyy = check.residual_dyy.max((fdy - s).abs() / s.abs().max(1.0));
                                let s = jet.dxy[jet.d2(k, b, a)];
                                check.residual_dxy = check.residual_dxy.max((fdx - s).abs() / s.abs().max(1.0));
                            }
                        }
                    }
                }
            }
        }
        for (label, r) in [
            ("∂x", check.residual_dx),
            ("∂y", check.residual_dy),
            ("∂xx", check.residual_dxx),
            ("∂xy", check.residual_dxy),
            ("∂yy", check.residual_dyy),
        ] {
            if r > DERIVATIVE_TOL {
                violations.push(format!("{name}: supplied {label} differs from finite differences by {r:.3e}"));
            }
        }
        if !check.lipschitz_u.is_finite() {
            violations.push(format!("{name}: no finite Lipschitz constant in u"));
        }
        checks.push(check);
    }
    Ok(HypothesisReport {
        samples: budget,
        tolerance: DERIVATIVE_TOL,
        coefficients: checks,
        violations,
    })
}

#[allow(clippy::too_many_arguments)]
fn eval_checked(
    coef: &dyn Coefficient,
    name: &str,
    t: f64,
    x: &[f64],
    y: &[f64],
    u: &[f64],
    order: Order,
    jet: &mut Jet,
) -> Result<()> {
    jet.reset(order);
    coef.eval(t, x, y, u, order, jet);
    if !jet.is_finite(order) {
        return Err(Error::Evaluation {
            what: name.to_string(),
            point: format!("t={t}, x={x:?}, y={y:?}, u={u:?}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// Scalar linear-quadratic scenarios

/// Choice of delay measure for the scalar scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureChoice {
    /// Unit atom at `-d`.
    Dirac,
    /// Unit-mass uniform density.
    Uniform,
    /// Half an atom at `-d` plus half the uniform density.
    Mixed,
    /// The zero measure.
    None,
}

impl MeasureChoice {
    pub fn build(self, d: f64) -> Result<DelayMeasure> {
        if d == 0.0 {
            return Ok(match self {
                MeasureChoice::None => DelayMeasure::zero(0.0),
                _ => DelayMeasure::dirac(0.0, 0.0, 1.0)?,
            });
        }
        match self {
            MeasureChoice::Dirac => DelayMeasure::dirac(d, -d, 1.0),
            MeasureChoice::Uniform => DelayMeasure::uniform(d),
            MeasureChoice::Mixed => DelayMeasure::new(
                d,
                vec![Atom { theta: -d, weight: 0.5 }],
                Some(Density::Constant(0.5 / d)),
            ),
            MeasureChoice::None => Ok(DelayMeasure::zero(d)),
        }
    }
}

/// Parameters of the scalar delay problem
/// `dx = (a₀x + a₁∫x dμ_b + b_u·u + κ_b sin x) dt + (s₀x + s₁∫x dμ_σ + c_u·u + c_xu·u·x + κ_σ sin x) dW`
/// with cost `∫ (q x² + c·u + w (u − γ(t))²) dt + h_w x(T)²`.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LqDelayParams {
    pub a0: f64,
    pub a1: f64,
    pub b_u: f64,
    pub s0: f64,
    pub s1: f64,
    pub c_u: f64,
    pub c_xu: f64,
    pub kappa_b: f64,
    pub kappa_sigma: f64,
    pub x0: f64,
    pub delay: f64,
    pub horizon: f64,
    pub mu_b: MeasureChoice,
    pub mu_sigma: MeasureChoice,
    pub controls: Vec<f64>,
    pub state_weight: f64,
    pub terminal_weight: f64,
    pub control_weight: f64,
    pub tracking_weight: f64,
    /// Piecewise-constant target `γ(t)`: `(start time, value)` pairs in increasing time.
    pub target: Vec<(f64, f64)>,
}

impl Default for LqDelayParams {
    fn default() -> Self {
        Self {
            a0: 0.0,
            a1: 0.0,
            b_u: 1.0,
            s0: 0.0,
            s1: 0.0,
            c_u: 0.0,
            c_xu: 0.0,
            kappa_b: 0.0,
            kappa_sigma: 0.0,
            x0: 1.0,
            delay: 1.0,
            horizon: 1.0,
            mu_b: MeasureChoice::Dirac,
            mu_sigma: MeasureChoice::Dirac,
            controls: vec![-1.0, 1.0],
            state_weight: 1.0,
            terminal_weight: 1.0,
            control_weight: 0.0,
            tracking_weight: 0.0,
            target: vec![],
        }
    }
}

impl LqDelayParams {
    pub fn target_at(&self, t: f64) -> f64 {
        let mut g = 0.0;
        for &(start, v) in &self.target {
            if t + 1e-12 >= start {
                g = v;
            }
        }
        g
    }
}

pub fn scenario_lq_delay(params: &LqDelayParams) -> Result<ProblemSpec> {
    if params.controls.is_empty() {
        return Err(Error::Domain("control set must not be empty".into()));
    }
    let p = params.clone();
    let (a0, a1, bu, kb) = (p.a0, p.a1, p.b_u, p.kappa_b);
    let drift = move |_t: f64, x: &[f64], y: &[f64], u: &[f64], order: Order, j: &mut Jet| {
        let (sx, cx) = x[0].sin_cos();
        j.value[0] = a0 * x[0] + a1 * y[0] + bu * u[0] + kb * sx;
        if order >= Order::First {
            j.dx[0] = a0 + kb * cx;
            j.dy[0] = a1;
        }
        if order >= Order::Second {
            j.dxx[0] = -kb * sx;
        }
    };
    let (s0, s1, cu, cxu, ks) = (p.s0, p.s1, p.c_u, p.c_xu, p.kappa_sigma);
    let diffusion = move |_t: f64, x: &[f64], y: &[f64], u: &[f64], order: Order, j: &mut Jet| {
        let (sx, cx) = x[0].sin_cos();
        j.value[0] = s0 * x[0] + s1 * y[0] + cu * u[0] + cxu * u[0] * x[0] + ks * sx;
        if order >= Order::First {
            j.dx[0] = s0 + cxu * u[0] + ks * cx;
            j.dy[0] = s1;
        }
        if order >= Order::Second {
            j.dxx[0] = -ks * sx;
        }
    };
    let tp = p.clone();
    let running = move |t: f64, x: &[f64], _y: &[f64], u: &[f64], order: Order, j: &mut Jet| {
        let g = tp.target_at(t);
        j.value[0] = tp.state_weight * x[0] * x[0]
            + tp.control_weight * u[0]
            + tp.tracking_weight * (u[0] - g) * (u[0] - g);
        if order >= Order::First {
            j.dx[0] = 2.0 * tp.state_weight * x[0];
        }
        if order >= Order::Second {
            j.dxx[0] = 2.0 * tp.state_weight;
        }
    };
    let hw = p.terminal_weight;
    let terminal = move |_t: f64, x: &[f64], _y: &[f64], _u: &[f64], order: Order, j: &mut Jet| {
        j.value[0] = hw * x[0] * x[0];
        if order >= Order::First {
            j.dx[0] = 2.0 * hw * x[0];
        }
        if order >= Order::Second {
            j.dxx[0] = 2.0 * hw;
        }
    };
    Ok(ProblemSpec {
        name: "lq_delay".into(),
        state_dim: 1,
        noise_dim: 1,
        control_dim: 1,
        horizon: p.horizon,
        delay: p.delay,
        drift: Arc::new(drift),
        diffusion: Arc::new(diffusion),
        running_cost: Arc::new(running),
        terminal_cost: Arc::new(terminal),
        mu_b: p.mu_b.build(p.delay)?,
        mu_sigma: p.mu_sigma.build(p.delay)?,
        mu_ell: DelayMeasure::zero(p.delay),
        mu_h: DelayMeasure::zero(p.delay),
        control_set: p.controls.iter().map(|&c| vec![c]).collect(),
        history: History::Constant(vec![p.x0]),
        convention: "minimisation of the stated cost".into(),
    })
}

/// The scalar problem with both delays pointwise at `-d`.
pub fn scenario_pointwise(params: &LqDelayParams) -> Result<ProblemSpec> {
    let mut p = params.clone();
    p.mu_b = MeasureChoice::Dirac;
    p.mu_sigma = MeasureChoice::Dirac;
    let mut spec = scenario_lq_delay(&p)?;
    spec.name = "pointwise".into();
    Ok(spec)
}

/// Control-free dynamics with cost `q x² + (u − γ(t))²`; the optimal control is `u = γ`.
pub fn scenario_tracking(params: &LqDelayParams) -> Result<ProblemSpec> {
    let mut p = params.clone();
    p.b_u = 0.0;
    p.c_u = 0.0;
    p.c_xu = 0.0;
    p.control_weight = 0.0;
    if p.tracking_weight == 0.0 {
        p.tracking_weight = 1.0;
    }
    for &(_, g) in &p.target {
        if !p.controls.iter().any(|c| (c - g).abs() < 1e-12) {
            return Err(Error::Domain(format!("target value {g} is not in the control set")));
        }
    }
    let mut spec = scenario_lq_delay(&p)?;
    spec.name = "tracking".into();
    Ok(spec)
}

// ---------------------------------------------------------------------------------------------
// Portfolio problem

/// Value and derivatives of a market coefficient `f(t, S, y)` with `y` a past integral of `S`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MarketJet {
    pub v: f64,
    pub s: f64,
    pub y: f64,
    pub ss: f64,
    pub sy: f64,
    pub yy: f64,
}

pub type MarketFn = Arc<dyn Fn(f64, f64, f64) -> MarketJet + Send + Sync>;
/// `U₁(t, V, c)` returning `(value, ∂V, ∂VV)`.
pub type RunningUtility = Arc<dyn Fn(f64, f64, f64) -> (f64, f64, f64) + Send + Sync>;
/// `U₂(V)` returning `(value, ∂V, ∂VV)`.
pub type TerminalUtility = Arc<dyn Fn(f64) -> (f64, f64, f64) + Send + Sync>;

pub fn market_constant(c: f64) -> MarketFn {
    Arc::new(move |_, _, _| MarketJet { v: c, ..Default::default() })
}

/// `base + amp·(1 + ½ tanh(y/S₀ − 1))`: a positive premium driven by the delayed price.
pub fn market_tanh_premium(base: f64, amp: f64, s_ref: f64) -> MarketFn {
    Arc::new(move |_, _, y| {
        let z = y / s_ref - 1.0;
        let th = z.tanh();
        let sech2 = 1.0 - th * th;
        MarketJet {
            v: base + amp * (1.0 + 0.5 * th),
            y: 0.5 * amp * sech2 / s_ref,
            yy: -amp * sech2 * th / (s_ref * s_ref),
            ..Default::default()
        }
    })
}

#[derive(Clone)]
pub struct PortfolioParams {
    pub b: MarketFn,
    pub sigma: MarketFn,
    /// Interest rate; its past dependence is read through `μ_b`.
    pub r: MarketFn,
    pub mu_b: DelayMeasure,
    pub mu_sigma: DelayMeasure,
    pub u1: RunningUtility,
    pub u2: TerminalUtility,
    pub consumption: Vec<f64>,
    pub investment: Vec<f64>,
    pub s0: f64,
    pub v0: f64,
    pub delay: f64,
    pub horizon: f64,
}

/// Parameters of the default portfolio configuration.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PortfolioConfig {
    pub rate: f64,
    pub premium: f64,
    pub volatility: f64,
    pub consumption_weight: f64,
    pub terminal_weight: f64,
    pub consumption: Vec<f64>,
    pub investment: Vec<f64>,
    pub s0: f64,
    pub v0: f64,
    pub delay: f64,
    pub horizon: f64,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            rate: 0.05,
            premium: 0.1,
            volatility: 0.2,
            consumption_weight: 1.6,
            terminal_weight: 1.0,
            consumption: vec![0.0, 0.25, 0.5, 1.0],
            investment: vec![0.0, 0.5, 1.0],
            s0: 1.0,
            v0: 1.0,
            delay: 0.25,
            horizon: 1.0,
        }
    }
}

impl PortfolioConfig {
    /// Market with constant rate and volatility, a premium driven by the delayed price,
    /// `U₁ = α ln(1 + c)` and `U₂ = κ V`.
    pub fn params(&self) -> Result<PortfolioParams> {
        let alpha = self.consumption_weight;
        let kappa = self.terminal_weight;
        Ok(PortfolioParams {
            b: market_tanh_premium(self.rate, self.premium, self.s0),
            sigma: market_constant(self.volatility),
            r: market_constant(self.rate),
            mu_b: DelayMeasure::dirac(self.delay, -self.delay, 1.0)?,
            mu_sigma: DelayMeasure::dirac(self.delay, -self.delay, 1.0)?,
            u1: Arc::new(move |_, _, c| (alpha * (1.0 + c).ln(), 0.0, 0.0)),
            u2: Arc::new(move |v| (kappa * v, kappa, 0.0)),
            consumption: self.consumption.clone(),
            investment: self.investment.clone(),
            s0: self.s0,
            v0: self.v0,
            delay: self.delay,
            horizon: self.horizon,
        })
    }
}

/// Two-state problem `x = (S, V)`:
/// `dS = S[b dt + σ dW]`, `dV = [r(V − π) − c + πb] dt + πσ dW`, control `(π, c)`,
/// cost `−∫U₁(t, V, c) dt − U₂(V(T))`.
pub fn scenario_portfolio(params: &PortfolioParams) -> Result<ProblemSpec> {
    if params.consumption.is_empty() {
        return Err(Error::Domain("consumption set must not be empty".into()));
    }
    if params.investment.is_empty() {
        return Err(Error::Domain("investment grid must not be empty".into()));
    }
    if params.consumption.iter().any(|c| *c < 0.0) {
        return Err(Error::Domain("consumption values must be non-negative".into()));
    }
    let (bf, rf) = (params.b.clone(), params.r.clone());
    let drift = move |t: f64, x: &[f64], y: &[f64], u: &[f64], order: Order, j: &mut Jet| {
        let (s, v) = (x[0], x[1]);
        let (pi, c) = (u[0], u[1]);
        let b = bf(t, s, y[0]);
        let r = rf(t, s, y[0]);
        j.value[0] = s * b.v;
        j.value[1] = r.v * (v - pi) - c + pi * b.v;
        if order >= Order::First {
            // d = 2: dx[k*2 + a]
            j.dx[0] = b.v + s * b.s;
            j.dy[0] = s * b.y;
            j.dx[2] = r.s * (v - pi) + pi * b.s;
            j.dx[3] = r.v;
            j.dy[2] = r.y * (v - pi) + pi * b.y;
        }
        if order >= Order::Second {
            // dxx[(k*2 + a)*2 + b]
            j.dxx[0] = 2.0 * b.s + s * b.ss;
            j.dxy[0] = b.y + s * b.sy;
            j.dyy[0] = s * b.yy;
            j.dxx[4] = r.ss * (v - pi) + pi * b.ss;
            j.dxx[5] = r.s;
            j.dxx[6] = r.s;
            j.dxy[4] = r.sy * (v - pi) + pi * b.sy;
            j.dxy[6] = r.y;
            j.dyy[4] = r.yy * (v - pi) + pi * b.yy;
        }
    };
    let sf = params.sigma.clone();
    let diffusion = move |t: f64, x: &[f64], y: &[f64], u: &[f64], order: Order, j: &mut Jet| {
        let s = x[0];
        let pi = u[0];
        let sg = sf(t, s, y[0]);
        j.value[0] = s * sg.v;
        j.value[1] = pi * sg.v;
        if order >= Order::First {
            j.dx[0] = sg.v + s * sg.s;
            j.dy[0] = s * sg.y;
            j.dx[2] = pi * sg.s;
            j.dy[2] = pi * sg.y;
        }
        if order >= Order::Second {
            j.dxx[0] = 2.0 * sg.s + s * sg.ss;
            j.dxy[0] = sg.y + s * sg.sy;
            j.dyy[0] = s * sg.yy;
            j.dxx[4] = pi * sg.ss;
            j.dxy[4] = pi * sg.sy;
            j.dyy[4] = pi * sg.yy;
        }
    };
    let u1 = params.u1.clone();
    let running = move |t: f64, x: &[f64], _y: &[f64], u: &[f64], order: Order, j: &mut Jet| {
        let (val, dv, dvv) = u1(t, x[1], u[1]);
        j.value[0] = -val;
        if order >= Order::First {
            j.dx[1] = -dv;
        }
        if order >= Order::Second {
            j.dxx[3] = -dvv;
        }
    };
    let u2 = params.u2.clone();
    let terminal = move |_t: f64, x: &[f64], _y: &[f64], _u: &[f64], order: Order, j: &mut Jet| {
        let (val, dv, dvv) = u2(x[1]);
        j.value[0] = -val;
        if order >= Order::First {
            j.dx[1] = -dv;
        }
        if order >= Order::Second {
            j.dxx[3] = -dvv;
        }
    };
    let mut control_set = vec![];
    for &pi in &params.investment {
        for &c in &params.consumption {
            control_set.push(vec![pi, c]);
        }
    }
    let (s0, v0) = (params.s0, params.v0);
    Ok(ProblemSpec {
        name: "portfolio".into(),
        state_dim: 2,
        noise_dim: 1,
        control_dim: 2,
        horizon: params.horizon,
        delay: params.delay,
        drift: Arc::new(drift),
        diffusion: Arc::new(diffusion),
        running_cost: Arc::new(running),
        terminal_cost: Arc::new(terminal),
        mu_b: params.mu_b.clone(),
        mu_sigma: params.mu_sigma.clone(),
        mu_ell: DelayMeasure::zero(params.delay),
        mu_h: DelayMeasure::zero(params.delay),
        control_set,
        history: History::Function(Arc::new(move |_| vec![s0, v0])),
        convention: "utility maximisation stored as minimisation of the negated utility".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq(params: LqDelayParams) -> ProblemSpec {
        scenario_lq_delay(&params).unwrap()
    }

    #[test]
    fn lq_scenario_passes_validation() {
        let spec = lq(LqDelayParams {
            a0: 0.3,
            a1: -0.4,
            s0: 0.2,
            s1: 0.1,
            c_u: 0.5,
            c_xu: 0.3,
            kappa_b: 0.2,
            kappa_sigma: 0.1,
            ..Default::default()
        });
        let r = validate_hypotheses(&spec, 100).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        for c in &r.coefficients {
            assert!(c.lipschitz_u.is_finite());
        }
    }

    #[test]
    fn quadratic_in_u_drift_is_bounded_on_finite_set() {
        let mut spec = lq(LqDelayParams::default());
        spec.drift = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = u[0] * u[0];
        });
        spec.control_set = vec![vec![-3.0], vec![0.0], vec![5.0]];
        let r = validate_hypotheses(&spec, 50).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.coefficients[0].bound_at_origin, 25.0);
    }

    #[test]
    fn wrong_derivative_is_reported() {
        let mut spec = lq(LqDelayParams { a0: 0.7, ..Default::default() });
        spec.drift = Arc::new(|_t: f64, x: &[f64], _y: &[f64], u: &[f64], o: Order, j: &mut Jet| {
            j.value[0] = 0.7 * x[0] + u[0];
            if o >= Order::First {
                j.dx[0] = 0.7 + 1.0;
            }
        });
        let r = validate_hypotheses(&spec, 20).unwrap();
        assert!(!r.passed());
        assert!((r.coefficients[0].residual_dx - 1.0 / 1.7).abs() < 1e-3);
    }

    #[test]
    fn non_finite_output_is_an_evaluation_error() {
        let mut spec = lq(LqDelayParams::default());
        spec.running_cost = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = f64::NAN;
        });
        assert!(matches!(validate_hypotheses(&spec, 5), Err(Error::Evaluation { .. })));
    }

    #[test]
    fn portfolio_scenario_passes_validation() {
        let spec = scenario_portfolio(&PortfolioConfig::default().params().unwrap()).unwrap();
        assert_eq!(spec.control_set.len(), 12);
        let r = validate_hypotheses(&spec, 100).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
    }

    #[test]
    fn empty_consumption_set_is_rejected() {
        let mut p = PortfolioConfig::default().params().unwrap();
        p.consumption.clear();
        assert!(matches!(scenario_portfolio(&p), Err(Error::Domain(_))));
    }

    #[test]
    fn scenario_builders_are_deterministic() {
        let params = LqDelayParams { a0: 0.2, kappa_b: 0.3, c_u: 1.0, ..Default::default() };
        let a = lq(params.clone());
        let b = lq(params);
        let mut ja = a.new_jets();
        let mut jb = b.new_jets();
        for k in 0..10 {
            let x = [k as f64 * 0.37 - 1.0];
            a.drift.eval(0.1, &x, &[0.2], &[1.0], Order::Second, &mut ja.b);
            b.drift.eval(0.1, &x, &[0.2], &[1.0], Order::Second, &mut jb.b);
            assert_eq!(ja.b, jb.b);
        }
    }

    #[test]
    fn tracking_target_must_be_admissible() {
        let p = LqDelayParams { target: vec![(0.0, 0.5)], ..Default::default() };
        assert!(scenario_tracking(&p).is_err());
    }
}
