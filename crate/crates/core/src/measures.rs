//! Finite signed measures on `[-d, 0]`, past integrals on the time grid, and mollification.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

const NODE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub theta: f64,
    pub weight: f64,
}

/// Density part of a delay measure.
#[derive(Clone)]
pub enum Density {
    /// `1/d` on `[-d, 0]`.
    Uniform,
    Constant(f64),
    /// `λ e^{λθ}` normalised to unit mass on `[-d, 0]`.
    Exponential(f64),
    /// Samples on a uniform grid of `[-d, 0]` (first value at `-d`), linearly interpolated.
    Samples(Vec<f64>),
    Function(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    /// Hat-kernel smoothing of another measure with half-width `d/n`.
    Mollified { source: Box<DelayMeasure>, n: usize },
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Density::Uniform => write!(f, "Uniform"),
            Density::Constant(c) => write!(f, "Constant({c})"),
            Density::Exponential(l) => write!(f, "Exponential({l})"),
            Density::Samples(v) => write!(f, "Samples(len={})", v.len()),
            Density::Function(_) => write!(f, "Function"),
            Density::Mollified { n, .. } => write!(f, "Mollified(n={n})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DelayMeasure {
    pub span: f64,
    pub atoms: Vec<Atom>,
    pub density: Option<Density>,
    /// Split off-grid atoms between neighbouring nodes instead of rejecting them.
    pub interpolate_atoms: bool,
    /// Default θ-grid resolution used when no time grid is supplied.
    pub resolution: usize,
}

pub const DEFAULT_RESOLUTION: usize = 256;

impl DelayMeasure {
    pub fn new(span: f64, atoms: Vec<Atom>, density: Option<Density>) -> Result<Self> {
        if !(span >= 0.0) || !span.is_finite() {
            return Err(Error::Domain(format!("measure span must be non-negative, got {span}")));
        }
        for a in &atoms {
            if !(a.theta >= -span - NODE_TOL && a.theta <= NODE_TOL) || !a.weight.is_finite() {
                return Err(Error::Domain(format!(
                    "atom at {} with weight {} lies outside [-{span}, 0]",
                    a.theta, a.weight
                )));
            }
        }
        if density.is_some() && span == 0.0 {
            return Err(Error::Domain("a density needs a positive span".into()));
        }
        Ok(Self {
            span,
            atoms,
            density,
            interpolate_atoms: false,
            resolution: DEFAULT_RESOLUTION,
        })
    }

    pub fn zero(span: f64) -> Self {
        Self::new(span, vec![], None).expect("zero measure")
    }

    pub fn dirac(span: f64, theta: f64, weight: f64) -> Result<Self> {
        Self::new(span, vec![Atom { theta, weight }], None)
    }

    /// Unit-mass uniform density on `[-d, 0]`.
    pub fn uniform(span: f64) -> Result<Self> {
        Self::new(span, vec![], Some(Density::Uniform))
    }

    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution.max(1);
        self
    }

    pub fn with_interpolation(mut self, on: bool) -> Self {
        self.interpolate_atoms = on;
        self
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.iter().all(|a| a.weight == 0.0) && self.density.is_none()
    }

    pub fn has_atoms(&self) -> bool {
        self.atoms.iter().any(|a| a.weight != 0.0)
    }

    /// Node weights on the θ-grid with `lag` intervals.
    pub fn weights(&self, lag: usize) -> Result<NodeWeights> {
        let mut w = vec![0.0; lag + 1];
        if lag == 0 {
            for a in &self.atoms {
                w[0] += a.weight;
            }
            return Ok(NodeWeights::from_dense(w));
        }
        let h = self.span / lag as f64;
        for a in &self.atoms {
            let pos = (a.theta + self.span) / h;
            let r = pos.round();
            if (pos - r).abs() <= NODE_TOL * pos.abs().max(1.0) {
                w[(r as usize).min(lag)] += a.weight;
            } else if self.interpolate_atoms {
                let lo = pos.floor().max(0.0) as usize;
                let hi = (lo + 1).min(lag);
                let frac = pos - lo as f64;
                w[lo] += a.weight * (1.0 - frac);
                w[hi] += a.weight * frac;
            } else {
                return Err(Error::Alignment(format!(
                    "atom at θ = {} is not on the θ-grid of step {h}",
                    a.theta
                )));
            }
        }
        if let Some(density) = &self.density {
            let dens = self.density_nodes(density, lag)?;
            for (wj, dj) in w.iter_mut().zip(dens) {
                *wj += dj;
            }
        }
        Ok(NodeWeights::from_dense(w))
    }

    /// Trapezoid-weighted density masses per node.
    fn density_nodes(&self, density: &Density, lag: usize) -> Result<Vec<f64>> {
        let d = self.span;
        let h = d / lag as f64;
        let tw = |j: usize| if j == 0 || j == lag { 0.5 * h } else { h };
        let theta = |j: usize| -d + j as f64 * h;
        let out = match density {
            Density::Mollified { source, n } => spread_hat(&source.weights(lag)?.dense, d, *n),
            other => (0..=lag)
                .map(|j| tw(j) * sample_density(other, d, theta(j)))
                .collect(),
        };
        Ok(out)
    }

    pub fn total_variation(&self) -> f64 {
        self.total_variation_at(self.resolution)
    }

    /// Σ|atom weights| plus the trapezoid rule of |f| on a θ-grid with `lag` intervals.
    pub fn total_variation_at(&self, lag: usize) -> f64 {
        let mut tv: f64 = self.atoms.iter().map(|a| a.weight.abs()).sum();
        if let Some(density) = &self.density {
            if lag > 0 {
                match density {
                    Density::Mollified { source, n } => {
                        // Mollified densities live on the grid; a source that cannot be
                        // discretised there falls back to its own total variation.
                        match source.weights(lag) {
                            Ok(sw) => {
                                tv += spread_hat(&sw.dense, self.span, *n)
                                    .iter()
                                    .map(|v| v.abs())
                                    .sum::<f64>();
                            }
                            Err(_) => tv += source.total_variation_at(lag),
                        }
                    }
                    other => {
                        let h = self.span / lag as f64;
                        for j in 0..=lag {
                            let tw = if j == 0 || j == lag { 0.5 * h } else { h };
                            tv += tw * sample_density(other, self.span, -self.span + j as f64 * h).abs();
                        }
                    }
                }
            }
        }
        tv
    }
}

fn sample_density(density: &Density, d: f64, theta: f64) -> f64 {
    match density {
        Density::Uniform => 1.0 / d,
        Density::Constant(c) => *c,
        Density::Exponential(l) => {
            if l.abs() < 1e-12 {
                1.0 / d
            } else {
                l * (l * theta).exp() / (1.0 - (-l * d).exp())
            }
        }
        Density::Samples(v) => {
            if v.len() == 1 {
                return v[0];
            }
            let k = (v.len() - 1) as f64;
            let x = ((theta + d) / d * k).clamp(0.0, k);
            let i = (x.floor() as usize).min(v.len() - 2);
            let f = x - i as f64;
            v[i] * (1.0 - f) + v[i + 1] * f
        }
        Density::Function(f) => f(theta),
        Density::Mollified { .. } => unreachable!("mollified densities are node-based"),
    }
}

/// Spreads each node mass with a reflected hat kernel of half-width `d/n`.
///
/// Every source node keeps its mass exactly on the discrete grid, so positive inputs give
/// outputs of equal total variation.
fn spread_hat(source: &[f64], d: f64, n: usize) -> Vec<f64> {
    let lag = source.len() - 1;
    let mut out = vec![0.0; lag + 1];
    if lag == 0 {
        out[0] = source[0];
        return out;
    }
    let h = d / lag as f64;
    let r = d / n as f64;
    let reach = (r / h).ceil() as usize + 1;
    let kernel = |x: f64| ((r - x.abs()) / (r * r)).max(0.0);
    let mut raw = vec![0.0; lag + 1];
    for (j, &m) in source.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let tj = -d + j as f64 * h;
        let images = [tj, -2.0 * d - tj, -tj];
        let lo = j.saturating_sub(reach);
        let hi = (j + reach).min(lag);
        let mut mass = 0.0;
        for l in lo..=hi {
            let tl = -d + l as f64 * h;
            let v: f64 = images.iter().map(|c| kernel(tl - c)).sum();
            let tw = if l == 0 || l == lag { 0.5 * h } else { h };
            raw[l] = tw * v;
            mass += raw[l];
        }
        for l in lo..=hi {
            out[l] += m * raw[l] / mass;
            raw[l] = 0.0;
        }
    }
    out
}

/// Returns an atom-free measure whose density is `μ` smoothed by a hat kernel of half-width `d/n`.
pub fn mollify(mu: &DelayMeasure, n: usize) -> Result<DelayMeasure> {
    if n == 0 {
        return Err(Error::Domain("mollification index must be at least 1".into()));
    }
    if mu.span <= 0.0 {
        return Err(Error::Domain("cannot mollify a measure with zero span".into()));
    }
    if mu.is_zero() {
        return Ok(DelayMeasure::zero(mu.span).with_resolution(mu.resolution));
    }
    Ok(DelayMeasure {
        span: mu.span,
        atoms: vec![],
        density: Some(Density::Mollified {
            source: Box::new(mu.clone()),
            n,
        }),
        interpolate_atoms: false,
        resolution: mu.resolution,
    })
}

/// Quadrature weights of a measure on the θ-grid `θ_j = -d + j·Δt`, `j = 0..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeWeights {
    pub dense: Vec<f64>,
    sparse: Vec<(usize, f64)>,
    /// `(w₀, c, w_L)` when every interior weight equals `c`.
    band: Option<(f64, f64, f64)>,
}

impl NodeWeights {
    pub fn from_dense(dense: Vec<f64>) -> Self {
        let sparse = dense
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(j, w)| (j, *w))
            .collect();
        let l = dense.len() - 1;
        let band = (l >= 4 && dense[1] != 0.0 && dense[1..l].iter().all(|w| *w == dense[1]))
            .then(|| (dense[0], dense[1], dense[l]));
        Self { dense, sparse, band }
    }

    pub fn lag(&self) -> usize {
        self.dense.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.sparse.is_empty()
    }

    pub fn nonzero(&self) -> &[(usize, f64)] {
        &self.sparse
    }

    /// `Σ_j w_j · v(end - L + j)` for a row-major `d`-vector series `values`, where `end`
    /// indexes the node at θ = 0.
    #[inline]
    pub fn apply(&self, values: &[f64], d: usize, end: usize, out: &mut [f64]) {
        let lag = self.dense.len() - 1;
        let start = end - lag;
        out[..d].fill(0.0);
        for &(j, w) in &self.sparse {
            let base = (start + j) * d;
            for c in 0..d {
                out[c] += w * values[base + c];
            }
        }
    }

    /// Same as [`apply`](Self::apply), in O(1) for banded weights using running sums that
    /// cover at least the nodes before `end`.
    #[inline]
    pub fn apply_prefix(&self, values: &[f64], prefix: &PrefixSum, d: usize, end: usize, out: &mut [f64]) {
        match self.band {
            Some((w0, c, wl)) => {
                let start = end + 1 - self.dense.len();
                debug_assert!(prefix.filled >= end);
                for k in 0..d {
                    let interior = prefix.sums[end * d + k] - prefix.sums[(start + 1) * d + k];
                    out[k] = w0 * values[start * d + k] + wl * values[end * d + k] + c * interior;
                }
            }
            None => self.apply(values, d, end, out),
        }
    }

    pub fn total_variation(&self) -> f64 {
        self.dense.iter().map(|w| w.abs()).sum()
    }
}

/// Running sums `P_k = Σ_{k' < k} v_{k'}` of a vector series that is filled node by node.
#[derive(Debug, Clone)]
pub struct PrefixSum {
    sums: Vec<f64>,
    d: usize,
    filled: usize,
}

impl PrefixSum {
    pub fn new(nodes: usize, d: usize) -> Self {
        Self { sums: vec![0.0; (nodes + 1) * d], d, filled: 0 }
    }

    pub fn reset(&mut self) {
        self.filled = 0;
    }

    /// Extends the sums through node `upto`.
    #[inline]
    pub fn extend(&mut self, values: &[f64], upto: usize) {
        let d = self.d;
        while self.filled <= upto {
            let k = self.filled;
            for c in 0..d {
                self.sums[(k + 1) * d + c] = self.sums[k * d + c] + values[k * d + c];
            }
            self.filled += 1;
        }
    }
}

/// Values of a `d`-vector path on the window `{t - d, …, t}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PastSegment {
    pub values: Vec<f64>,
    pub dim: usize,
    pub dt: f64,
}

impl PastSegment {
    pub fn new(values: Vec<f64>, dim: usize, dt: f64) -> Result<Self> {
        if dim == 0 || values.is_empty() || values.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "segment of length {} is not a whole number of {dim}-vectors",
                values.len()
            )));
        }
        Ok(Self { values, dim, dt })
    }

    /// Samples `f(θ)` on the θ-grid of `[-span, 0]` with `lag` intervals.
    pub fn from_fn(span: f64, lag: usize, dim: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let dt = if lag == 0 { 0.0 } else { span / lag as f64 };
        let mut values = Vec::with_capacity((lag + 1) * dim);
        for j in 0..=lag {
            values.extend(f(-span + j as f64 * dt));
        }
        Self { values, dim, dt }
    }

    pub fn lag(&self) -> usize {
        self.values.len() / self.dim - 1
    }
}

/// `Σ_i w_i seg(θ_i) + ∫ f(θ) seg(θ) dθ` with the trapezoid rule on the segment grid.
pub fn past_integral(seg: &PastSegment, mu: &DelayMeasure) -> Result<Vec<f64>> {
    let lag = seg.lag();
    let span = lag as f64 * seg.dt;
    if (span - mu.span).abs() > NODE_TOL * mu.span.max(1.0) {
        return Err(Error::Shape(format!(
            "segment spans {span} but the measure spans {}",
            mu.span
        )));
    }
    let w = mu.weights(lag)?;
    let mut out = vec![0.0; seg.dim];
    w.apply(&seg.values, seg.dim, lag, &mut out);
    Ok(out)
}
