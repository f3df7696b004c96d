//! Independent reference solutions used by the integration tests.

#![allow(dead_code)]

/// Delay kernel of the scalar scenarios, `∫ f(t+θ) μ(dθ)` with unit mass.
#[derive(Clone, Copy, Debug)]
pub enum Kernel {
    Dirac,
    Uniform,
    /// Half atom at `-d`, half uniform density.
    Mixed,
}

/// Fine-step solver for the scalar linear delay pair
/// `x' = a₀x + a₁∫x(t+θ)μ(dθ) + f` with constant history `x₀`, and
/// `-p' = a₀p + a₁∫p(t−θ)μ(dθ) + 2q x` with `p(T) = 2 h_w x(T)` and `p = 0` after `T`.
///
/// Integrates interval by interval of length `d` with Heun steps of size `d/k`; the delayed
/// terms are read from already-computed nodes, the window integral by the trapezoid rule.
pub struct MethodOfSteps {
    pub a0: f64,
    pub a1: f64,
    /// Constant drift term.
    pub forcing: f64,
    pub delay: f64,
    pub horizon: f64,
    pub kernel: Kernel,
    pub x0: f64,
    pub q: f64,
    pub hw: f64,
    /// Substeps per delay interval.
    pub k: usize,
}

pub struct OracleSolution {
    pub h: f64,
    /// Nodes `0..=n` on `[0, T]`.
    pub x: Vec<f64>,
    pub p: Vec<f64>,
}

impl OracleSolution {
    /// Linear interpolation at `t`.
    pub fn at(v: &[f64], h: f64, t: f64) -> f64 {
        let s = t / h;
        let i = (s.floor() as usize).min(v.len() - 2);
        let w = s - i as f64;
        v[i] * (1.0 - w) + v[i + 1] * w
    }

    pub fn x_at(&self, t: f64) -> f64 {
        Self::at(&self.x, self.h, t)
    }

    pub fn p_at(&self, t: f64) -> f64 {
        Self::at(&self.p, self.h, t)
    }
}

impl MethodOfSteps {
    fn window(&self, values: &dyn Fn(isize) -> f64, i: isize, dir: isize) -> f64 {
        // ∫ over [t - d, t] (dir = -1) or [t, t + d] (dir = +1) of values, weighted by μ.
        let k = self.k as isize;
        let h = self.delay / self.k as f64;
        let atom = values(i + dir * k);
        let mut trap = 0.5 * (values(i) + values(i + dir * k));
        for j in 1..k {
            trap += values(i + dir * j);
        }
        let uniform = trap * h / self.delay;
        match self.kernel {
            Kernel::Dirac => atom,
            Kernel::Uniform => uniform,
            Kernel::Mixed => 0.5 * atom + 0.5 * uniform,
        }
    }

    pub fn solve(&self) -> OracleSolution {
        let h = self.delay / self.k as f64;
        let n = (self.horizon / h).round() as usize;
        let k = self.k as isize;
        // Forward: nodes -k..=n stored at offset k.
        let mut x = vec![self.x0; n + 1 + self.k];
        for i in 0..n as isize {
            let f0 = {
                let xs = &x;
                let read = |j: isize| xs[(j + k) as usize];
                self.a0 * read(i) + self.a1 * self.window(&read, i, -1) + self.forcing
            };
            let pred = x[(i + k) as usize] + h * f0;
            x[(i + 1 + k) as usize] = pred;
            let f1 = {
                let xs = &x;
                let read = |j: isize| xs[(j + k) as usize];
                self.a0 * read(i + 1) + self.a1 * self.window(&read, i + 1, -1) + self.forcing
            };
            x[(i + 1 + k) as usize] = x[(i + k) as usize] + 0.5 * h * (f0 + f1);
        }
        let xs: Vec<f64> = x[self.k..].to_vec();
        // Backward: nodes 0..=n + k, zero beyond n.
        let mut p = vec![0.0; n + 1 + self.k];
        p[n] = 2.0 * self.hw * xs[n];
        let rhs = |p: &[f64], i: isize| {
            let read = |j: isize| if j as usize > n { 0.0 } else { p[j as usize] };
            self.a0 * read(i) + self.a1 * self.window(&read, i, 1) + 2.0 * self.q * xs[i as usize]
        };
        for i in (1..=n as isize).rev() {
            let g0 = rhs(&p, i);
            p[(i - 1) as usize] = p[i as usize] + h * g0;
            let g1 = rhs(&p, i - 1);
            p[(i - 1) as usize] = p[i as usize] + 0.5 * h * (g0 + g1);
        }
        p.truncate(n + 1);
        OracleSolution { h, x: xs, p }
    }
}

/// `M(t) = e^{γ²(T−t)}`: second moment of the frozen geometric flow with unit start.
pub fn geometric_second_moment(gamma: f64, horizon: f64, s: f64) -> f64 {
    (gamma * gamma * (horizon - s)).exp()
}
