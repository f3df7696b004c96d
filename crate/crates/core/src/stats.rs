//! Deterministic reductions and small estimators shared by the Monte Carlo layers.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Pairwise summation with a fixed split order, so the result depends only on the input.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Self { mean, stderr: 0.0 }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n == 0 {
        return Estimate { mean: 0.0, stderr: 0.0 };
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return Estimate { mean, stderr: 0.0 };
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    Estimate {
        mean,
        stderr: (var / n as f64).sqrt(),
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        pairwise_sum(xs) / xs.len() as f64
    }
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

/// Slope of log2|y| against log2 x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.log2()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().max(f64::MIN_POSITIVE).log2()).collect();
    linear_fit(&lx, &ly).0
}

/// Mean of `y` corrected by zero-mean control variates `c` (row-major, `k` columns per sample).
///
/// The coefficient is the least-squares fit of `y` on the centred controls; the returned
/// standard error comes from the residual variance.
pub fn control_variate_mean(y: &[f64], c: &[f64], k: usize) -> Estimate {
    let n = y.len();
    if k == 0 || n <= k + 1 {
        return mean_stderr(y);
    }
    assert_eq!(c.len(), n * k);
    let my = mean(y);
    let mut mc = vec![0.0; k];
    for j in 0..k {
        let col: Vec<f64> = (0..n).map(|i| c[i * k + j]).collect();
        mc[j] = mean(&col);
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for i in 0..n {
        for a in 0..k {
            let ca = c[i * k + a] - mc[a];
            rhs[a] += ca * (y[i] - my);
            for b in 0..k {
                gram[(a, b)] += ca * (c[i * k + b] - mc[b]);
            }
        }
    }
    let scale = (0..k).map(|a| gram[(a, a)]).fold(0.0_f64, f64::max).max(1e-300);
    for a in 0..k {
        gram[(a, a)] += 1e-12 * scale;
    }
    let beta = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => return mean_stderr(y),
    };
    let adjusted: Vec<f64> = (0..n)
        .map(|i| {
            let mut v = y[i];
            for a in 0..k {
                v -= beta[a] * c[i * k + a];
            }
            v
        })
        .collect();
    let est = mean_stderr(&adjusted);
    let dof = (n - 1) as f64 / (n - 1 - k) as f64;
    Estimate {
        mean: est.mean,
        stderr: est.stderr * dof.sqrt(),
    }
}
