//! Least-squares conditional expectations on polynomial features.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    /// Total degree of the polynomial basis in the standardized raw features.
    pub degree: usize,
    pub ridge: f64,
    pub min_paths_per_feature: usize,
    /// Condition number above which a step is reported as ill-conditioned.
    pub max_condition: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            ridge: 1e-8,
            min_paths_per_feature: 50,
            max_condition: 1e13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub features: usize,
    pub condition: f64,
    /// Root-mean-square in-sample residual of the first target.
    pub residual: f64,
    pub deterministic: bool,
}

const CHUNK: usize = 512;

/// Polynomial features of standardized raw inputs, with the Cholesky factor of the
/// regularized Gram matrix ready for repeated projections.
pub struct Basis {
    pub paths: usize,
    pub features: usize,
    pub condition: f64,
    phi: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

fn monomials(r: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    let mut last: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..degree {
        let mut next = vec![];
        for m in &last {
            let from = m.last().copied().unwrap_or(0);
            for a in from..r {
                let mut n = m.clone();
                n.push(a);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        last = next;
    }
    out
}

impl Basis {
    /// Builds the basis from `raw` (`paths × r`, row-major). Constant columns are dropped.
    pub fn build(raw: &[f64], r: usize, paths: usize, cfg: &RegressionConfig, step: usize) -> Result<Self> {
        assert_eq!(raw.len(), paths * r);
        let mut kept = vec![];
        let mut shift = vec![];
        let mut scale = vec![];
        for a in 0..r {
            let col: Vec<f64> = (0..paths).map(|p| raw[p * r + a]).collect();
            let mean = pairwise_sum(&col) / paths as f64;
            let dev: Vec<f64> = col.iter().map(|v| (v - mean) * (v - mean)).collect();
            let var = pairwise_sum(&dev) / paths as f64;
            if var > 1e-14 * mean.abs().max(1.0).powi(2) {
                kept.push(a);
                shift.push(mean);
                scale.push(var.sqrt());
            }
        }
        let monos = monomials(kept.len(), cfg.degree);
        let f = monos.len();
        if f * cfg.min_paths_per_feature > paths {
            return Err(Error::Config(format!(
                "{f} regression features need at least {} paths, have {paths}",
                f * cfg.min_paths_per_feature
            )));
        }
        let mut phi = vec![0.0; paths * f];
        phi.par_chunks_mut(f).enumerate().for_each(|(p, row)| {
            let z: Vec<f64> = kept
                .iter()
                .enumerate()
                .map(|(k, &a)| (raw[p * r + a] - shift[k]) / scale[k])
                .collect();
            for (j, m) in monos.iter().enumerate() {
                row[j] = m.iter().map(|&a| z[a]).product();
            }
        });
        let partials: Vec<Vec<f64>> = phi
            .par_chunks(CHUNK * f)
            .map(|block| {
                let mut g = vec![0.0; f * f];
                for row in block.chunks(f) {
                    for a in 0..f {
                        for b in a..f {
                            g[a * f + b] += row[a] * row[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(f, f);
        for g in &partials {
            for a in 0..f {
                for b in a..f {
                    gram[(a, b)] += g[a * f + b];
                }
            }
        }
        for a in 0..f {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        gram /= paths as f64;
        for a in 0..f {
            gram[(a, a)] += cfg.ridge;
        }
        let eig = gram.clone().symmetric_eigenvalues();
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= cfg.max_condition) {
            return Err(Error::Conditioning {
                step,
                detail: format!("condition number {condition:.3e} with {f} features"),
            });
        }
        let chol = gram.cholesky().ok_or_else(|| Error::Conditioning {
            step,
            detail: "Gram matrix is not positive definite".into(),
        })?;
        Ok(Self { paths, features: f, condition, phi, chol })
    }

    /// In-sample fitted values of `targets` (`paths × t`), row-major.
    pub fn project(&self, targets: &[f64], t: usize) -> Vec<f64> {
        let beta = self.coefficients(targets, t);
        let f = self.features;
        let mut out = vec![0.0; self.paths * t];
        out.par_chunks_mut(t).enumerate().for_each(|(p, row)| {
            let phi = &self.phi[p * f..(p + 1) * f];
            for c in 0..t {
                let mut s = 0.0;
                for a in 0..f {
                    s += phi[a] * beta[a * t + c];
                }
                row[c] = s;
            }
        });
        out
    }

    /// Coefficients `β` (`features × t`, row-major) of the least-squares fit.
    pub fn coefficients(&self, targets: &[f64], t: usize) -> Vec<f64> {
        assert_eq!(targets.len(), self.paths * t);
        let f = self.features;
        let partials: Vec<Vec<f64>> = self
            .phi
            .par_chunks(CHUNK * f)
            .zip(targets.par_chunks(CHUNK * t))
            .map(|(pb, tb)| {
                let mut acc = vec![0.0; f * t];
                for (row, y) in pb.chunks(f).zip(tb.chunks(t)) {
                    for a in 0..f {
                        for c in 0..t {
                            acc[a * t + c] += row[a] * y[c];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut rhs = DMatrix::<f64>::zeros(f, t);
        for acc in &partials {
            for a in 0..f {
                for c in 0..t {
                    rhs[(a, c)] += acc[a * t + c];
                }
            }
        }
        rhs /= self.paths as f64;
        let sol = self.chol.solve(&rhs);
        let mut beta = vec![0.0; f * t];
        for a in 0..f {
            for c in 0..t {
                beta[a * t + c] = sol[(a, c)];
            }
        }
        beta
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.phi[p * self.features..(p + 1) * self.features]
    }
}

/// Root-mean-square of `target[:, 0] - fitted[:, 0]`.
pub fn residual_rms(targets: &[f64], fitted: &[f64], t: usize) -> f64 {
    let sq: Vec<f64> = targets
        .chunks(t)
        .zip(fitted.chunks(t))
        .map(|(a, b)| (a[0] - b[0]) * (a[0] - b[0]))
        .collect();
    (pairwise_sum(&sq) / sq.len().max(1) as f64).sqrt()
}

/// Column means of a `paths × t` block, broadcast to every row.
pub fn broadcast_mean(targets: &[f64], t: usize) -> Vec<f64> {
    let paths = targets.len() / t;
    let mut m = vec![0.0; t];
    for (c, mc) in m.iter_mut().enumerate() {
        let col: Vec<f64> = (0..paths).map(|p| targets[p * t + c]).collect();
        *mc = pairwise_sum(&col) / paths as f64;
    }
    let mut out = Vec::with_capacity(targets.len());
    for _ in 0..paths {
        out.extend_from_slice(&m);
    }
    out
}
