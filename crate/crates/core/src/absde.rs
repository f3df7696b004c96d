//! First-order adjoint: the anticipated backward equation solved backward on the grid with
//! regression estimates of conditional expectations, and the duality checks against the
//! first and second variations.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{NodeWeights, PrefixSum};
use crate::model::{ControlPath, Order, ProblemSpec};
use crate::paths::{BrownianBundle, TimeGrid};
use crate::regression::{residual_rms, Basis, RegressionConfig, StepDiagnostics};
use crate::sdde::{add_linear, control_id, quad, spike, BaseEval, FlowWeights, Label, NodeArgs, SpikeWindow, TrajectoryBundle};
use crate::stats::{mean_stderr, Estimate};

/// `(pᵃ, qᵃ)` per path on the nodes `0..=N+L`, zero beyond `T` (and `qᵃ` zero at `T`).
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub grid: TimeGrid,
    pub paths: usize,
    pub dim: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub control: String,
    pub deterministic: bool,
    pub diagnostics: Vec<StepDiagnostics>,
    p: Vec<f64>,
    q: Vec<f64>,
    /// Number of stored path rows: 1 when the solution is deterministic.
    rows: usize,
}

impl AdjointSolution {
    fn nodes(&self) -> usize {
        self.grid.steps + self.grid.lag + 1
    }

    #[inline]
    fn row(&self, path: usize) -> usize {
        if self.rows == 1 {
            0
        } else {
            path
        }
    }

    /// `pᵃ` at node `i ∈ 0..=N+L`.
    #[inline]
    pub fn p(&self, path: usize, i: usize) -> &[f64] {
        let d = self.dim;
        let base = (self.row(path) * self.nodes() + i) * d;
        &self.p[base..base + d]
    }

    /// `qᵃ` at node `i`, entry `(j, k)` at index `j*m + k`.
    #[inline]
    pub fn q(&self, path: usize, i: usize) -> &[f64] {
        let dm = self.dim * self.noise_dim;
        let base = (self.row(path) * self.nodes() + i) * dm;
        &self.q[base..base + dm]
    }

    /// Monte Carlo mean of `pᵃ` at node `i`.
    pub fn mean_p(&self, i: usize) -> Vec<f64> {
        (0..self.dim)
            .map(|c| {
                let col: Vec<f64> = (0..self.rows).map(|r| self.p(r, i)[c]).collect();
                crate::stats::mean(&col)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path, header: &[(&str, String)]) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            out,
            "# adjoint seed={} control={} T={} N={} dt={} d={} L={} paths={} deterministic={}",
            self.seed,
            self.control,
            self.grid.horizon,
            self.grid.steps,
            self.grid.dt,
            self.grid.delay,
            self.grid.lag,
            self.paths,
            self.deterministic
        )?;
        for (k, v) in header {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "path,t,process,component,value")?;
        for p in 0..self.rows {
            for i in 0..self.nodes() {
                let t = self.grid.time(i as isize);
                for (c, v) in self.p(p, i).iter().enumerate() {
                    writeln!(out, "{p},{t},p,{c},{v:e}")?;
                }
                for (c, v) in self.q(p, i).iter().enumerate() {
                    writeln!(out, "{p},{t},q,{c},{v:e}")?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `(lag, weight)` pairs of a weight vector: node `j` sits `L - j` steps in the past.
pub fn lag_weights(w: &NodeWeights) -> Vec<(usize, f64)> {
    let l = w.lag();
    let mut v: Vec<(usize, f64)> = w.nonzero().iter().map(|&(j, x)| (l - j, x)).collect();
    v.sort_by_key(|e| e.0);
    v
}

/// `Σ_lag ω_lag · a[i + lag]` over `i + lag < n`: the time-advanced pairing of a past integral.
#[inline]
pub fn anticipated(lags: &[(usize, f64)], series: &[f64], d: usize, i: usize, n: usize, min_lag: usize, out: &mut [f64]) {
    for &(lag, w) in lags {
        if lag < min_lag {
            continue;
        }
        let k = i + lag;
        if k >= n {
            break;
        }
        for c in 0..d {
            out[c] += w * series[k * d + c];
        }
    }
}

/// True when the base state and control carry no path dependence.
pub fn is_deterministic(base: &TrajectoryBundle, u: &ControlPath) -> bool {
    if !u.is_deterministic() {
        return false;
    }
    let first = base.path(0);
    (1..base.paths).all(|p| {
        base.path(p)
            .iter()
            .zip(first)
            .all(|(a, b)| (a - b).abs() <= 1e-7 * b.abs().max(1.0))
    })
}

/// Raw regression inputs at step `i`: the state and its distinct nonzero past integrals.
pub fn state_features(ev: &BaseEval, i: usize) -> (Vec<f64>, usize) {
    let d = ev.spec.state_dim;
    let wb = &ev.weights.b;
    let ws = &ev.weights.sigma;
    let use_b = !wb.is_zero();
    let use_s = !ws.is_zero() && (!use_b || ws.dense != wb.dense);
    let r = d * (1 + use_b as usize + use_s as usize);
    let paths = ev.base.paths;
    let mut raw = vec![0.0; paths * r];
    raw.par_chunks_mut(r).enumerate().for_each_init(
        || NodeArgs::new(d),
        |a, (p, row)| {
            ev.args(p, i, a);
            row[..d].copy_from_slice(&a.x);
            let mut o = d;
            if use_b {
                row[o..o + d].copy_from_slice(&a.yb);
                o += d;
            }
            if use_s {
                row[o..o + d].copy_from_slice(&a.ys);
            }
        },
    );
    (raw, r)
}

/// Backward recursion for `(pᵃ, qᵃ)` along the base pair.
///
/// The recursion is the exact adjoint of the Euler scheme for the first variation, so the
/// discrete duality holds up to the regression error.
pub fn solve_absde(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    w: &BrownianBundle,
    cfg: &RegressionConfig,
) -> Result<AdjointSolution> {
    if !spec.mu_h.is_zero() {
        return Err(Error::Pipeline(
            "the anticipated adjoint requires a terminal cost without past dependence".into(),
        ));
    }
    if base.grid != w.grid || base.paths != w.paths || base.provenance.seed != w.seed {
        return Err(Error::Consistency("base trajectory was not simulated on this bundle".into()));
    }
    if base.label != Label::State && base.label != Label::Spiked {
        return Err(Error::Consistency("adjoint needs a state trajectory".into()));
    }
    let ev = BaseEval::new(spec, base, u)?;
    let grid = base.grid;
    let (d, m) = (spec.state_dim, spec.noise_dim);
    let (n, lag) = (grid.steps, grid.lag);
    let dt = grid.dt;
    let nodes = n + lag + 1;
    let det = is_deterministic(base, u);
    let rows = if det { 1 } else { base.paths };
    let lb = lag_weights(&ev.weights.b);
    let ll = lag_weights(&ev.weights.ell);
    let ls = lag_weights(&ev.weights.sigma);
    let ws_now = ev.weights.sigma.dense[lag];
    let dm = d * m;

    let mut p = vec![0.0; rows * nodes * d];
    let mut q = vec![0.0; rows * nodes * dm];
    // Per-row histories of b_yᵀp_{i+1}, ℓ_y and Σ_k σ^k_yᵀq^k, indexed by step.
    let mut bp = vec![0.0; rows * n * d];
    let mut ly = vec![0.0; rows * n * d];
    let mut sq = vec![0.0; rows * n * d];

    p.par_chunks_mut(nodes * d).enumerate().for_each_init(
        || (spec.new_jets(), NodeArgs::new(d)),
        |(jets, a), (r, row)| {
            ev.args(r, n, a);
            ev.terminal(a, Order::First, jets);
            row[n * d..(n + 1) * d].copy_from_slice(&jets.h.dx[..d]);
        },
    );
    let t_cols = d + dm;
    let mut targets = vec![0.0; rows * t_cols];
    // σ_x and σ_y per row for the current step.
    let mut sig = vec![0.0; rows * 2 * dm * d];
    let mut diagnostics = Vec::with_capacity(n);

    for i in (0..n).rev() {
        {
            let p_ro = &p;
            let sq_ro = &sq;
            let ly_ro = &mut ly;
            let bp_ro = &mut bp;
            // Store step-i drivers, then assemble targets.
            bp_ro
                .par_chunks_mut(n * d)
                .zip(ly_ro.par_chunks_mut(n * d))
                .zip(targets.par_chunks_mut(t_cols))
                .zip(sig.par_chunks_mut(2 * dm * d))
                .enumerate()
                .for_each_init(
                    || (spec.new_jets(), NodeArgs::new(d)),
                    |(jets, a), (r, (((bpr, lyr), tr), sr))| {
                        ev.args(r, i, a);
                        ev.coefficients(i, u.at(r, i), a, Order::First, jets);
                        let pn = &p_ro[(r * nodes + i + 1) * d..(r * nodes + i + 2) * d];
                        for c in 0..d {
                            let mut s = 0.0;
                            for j in 0..d {
                                s += jets.b.dy[j * d + c] * pn[j];
                            }
                            bpr[i * d + c] = s;
                            lyr[i * d + c] = jets.ell.dy[c];
                        }
                        let z = &mut tr[..d];
                        for c in 0..d {
                            let mut s = jets.ell.dx[c];
                            for j in 0..d {
                                s += jets.b.dx[j * d + c] * pn[j];
                            }
                            z[c] = s;
                        }
                        anticipated(&lb, bpr, d, i, n, 0, z);
                        anticipated(&ll, lyr, d, i, n, 0, z);
                        anticipated(&ls, &sq_ro[r * n * d..(r + 1) * n * d], d, i, n, 1, z);
                        for c in 0..d {
                            z[c] = pn[c] + dt * z[c];
                        }
                        if det {
                            tr[d..].fill(0.0);
                        } else {
                            let dw = w.increment(r, i);
                            for j in 0..d {
                                for k in 0..m {
                                    tr[d + j * m + k] = pn[j] * dw[k] / dt;
                                }
                            }
                        }
                        sr[..dm * d].copy_from_slice(&jets.sigma.dx);
                        sr[dm * d..].copy_from_slice(&jets.sigma.dy);
                    },
                );
        }
        let (fitted, diag) = if det {
            (
                targets.clone(),
                StepDiagnostics { step: i, features: 1, condition: 1.0, residual: 0.0, deterministic: true },
            )
        } else {
            let (raw, rdim) = state_features(&ev, i);
            let basis = Basis::build(&raw, rdim, rows, cfg, i)?;
            let fit = basis.project(&targets, t_cols);
            let res = residual_rms(&targets, &fit, t_cols);
            (
                fit,
                StepDiagnostics {
                    step: i,
                    features: basis.features,
                    condition: basis.condition,
                    residual: res,
                    deterministic: false,
                },
            )
        };
        diagnostics.push(diag);
        p.par_chunks_mut(nodes * d)
            .zip(q.par_chunks_mut(nodes * dm))
            .zip(sq.par_chunks_mut(n * d))
            .enumerate()
            .for_each(|(r, ((pr, qr), sqr))| {
                let fr = &fitted[r * t_cols..(r + 1) * t_cols];
                let sr = &sig[r * 2 * dm * d..(r + 1) * 2 * dm * d];
                let (sx, sy) = sr.split_at(dm * d);
                let qi = &fr[d..];
                qr[i * dm..(i + 1) * dm].copy_from_slice(qi);
                for c in 0..d {
                    let mut ax = 0.0;
                    let mut ay = 0.0;
                    for o in 0..dm {
                        ax += sx[o * d + c] * qi[o];
                        ay += sy[o * d + c] * qi[o];
                    }
                    sqr[i * d + c] = ay;
                    pr[i * d + c] = fr[c] + dt * (ax + ws_now * ay);
                }
            });
        if let Some(r) = (0..rows).find(|&r| p[(r * nodes + i) * d..(r * nodes + i + 1) * d].iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step: i, path: r });
        }
    }
    diagnostics.reverse();
    Ok(AdjointSolution {
        grid,
        paths: base.paths,
        dim: d,
        noise_dim: m,
        seed: w.seed,
        control: control_id(u),
        deterministic: det,
        diagnostics,
        p,
        q,
        rows,
    })
}

// ---------------------------------------------------------------------------------------------
// Duality

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DualityReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub residual: f64,
    /// Standard error of the per-path difference.
    pub stderr: f64,
}

impl DualityReport {
    pub fn within(&self, k: f64) -> bool {
        self.residual.abs() <= k * self.stderr
    }

    fn from_paths(lhs: &[f64], rhs: &[f64]) -> Self {
        let diff: Vec<f64> = lhs.iter().zip(rhs).map(|(a, b)| a - b).collect();
        let e = mean_stderr(&diff);
        Self {
            lhs: mean_stderr(lhs),
            rhs: mean_stderr(rhs),
            residual: e.mean,
            stderr: e.stderr,
        }
    }
}

fn check_provenance(base: &TrajectoryBundle, v: &TrajectoryBundle, adj: &AdjointSolution) -> Result<()> {
    if v.grid != base.grid || v.paths != base.paths || v.provenance.seed != base.provenance.seed {
        return Err(Error::Consistency("variation and base come from different bundles".into()));
    }
    if adj.grid != base.grid || adj.paths != base.paths || adj.seed != base.provenance.seed {
        return Err(Error::Consistency("adjoint and base come from different bundles".into()));
    }
    if base.provenance.control != adj.control {
        return Err(Error::Consistency("adjoint was solved along a different control".into()));
    }
    if v.provenance.mollification.is_some() {
        return Err(Error::Consistency("duality checks use exact-measure variations".into()));
    }
    Ok(())
}

/// `E[h_x(x_N)·y_N]` against `E Σ [−ℓ_x·y − ℓ_y·J^ℓ(y) + qᵃ·δσ 1_E] Δt`.
pub fn duality_residual_first(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    y: &TrajectoryBundle,
    u: &ControlPath,
    adj: &AdjointSolution,
    win: &SpikeWindow,
) -> Result<DualityReport> {
    check_provenance(base, y, adj)?;
    if y.label != Label::FirstVariation {
        return Err(Error::Consistency("expected a first variation".into()));
    }
    let ev = BaseEval::new(spec, base, u)?;
    let grid = base.grid;
    let range = win.steps(&grid)?;
    let ue = spike(u, win, &grid)?;
    let (d, m, n, lag) = (spec.state_dim, spec.noise_dim, grid.steps, grid.lag);
    let dm = d * m;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = (0..base.paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    spec.new_jets(),
                    spec.new_jets(),
                    NodeArgs::new(d),
                    vec![0.0; d],
                    PrefixSum::new(grid.history_nodes(), d),
                )
            },
            |(jets, jv, a, jl, py), p| {
                let lhs: f64 = (0..d).map(|c| adj.p(p, n)[c] * y.terminal(p)[c]).sum();
                let ys = y.path(p);
                py.reset();
                let mut terms = Vec::with_capacity(n);
                for i in 0..n {
                    py.extend(ys, i + lag);
                    ev.args(p, i, a);
                    ev.coefficients(i, u.at(p, i), a, Order::First, jets);
                    ev.weights.ell.apply_prefix(ys, py, d, i + lag, jl);
                    let yi = y.at(p, i as isize);
                    let mut s = 0.0;
                    for c in 0..d {
                        s -= jets.ell.dx[c] * yi[c] + jets.ell.dy[c] * jl[c];
                    }
                    if range.contains(&i) {
                        ev.coefficients(i, ue.at(p, i), a, Order::Value, jv);
                        let qi = adj.q(p, i);
                        for o in 0..dm {
                            s += qi[o] * (jv.sigma.value[o] - jets.sigma.value[o]);
                        }
                    }
                    terms.push(s * grid.dt);
                }
                (lhs, crate::stats::pairwise_sum(&terms))
            },
        )
        .unzip();
    Ok(DualityReport::from_paths(&lhs, &rhs))
}

/// `E[h_x(x_N)·z_N]` against the discrete pairing of every forcing of the second variation
/// with `(pᵃ, qᵃ)`, minus the running-cost gradient terms along `z`.
pub fn duality_residual_second(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    y: &TrajectoryBundle,
    z: &TrajectoryBundle,
    u: &ControlPath,
    adj: &AdjointSolution,
    win: &SpikeWindow,
) -> Result<DualityReport> {
    check_provenance(base, y, adj)?;
    check_provenance(base, z, adj)?;
    if z.label != Label::SecondVariation || y.label != Label::FirstVariation {
        return Err(Error::Consistency("expected first and second variations".into()));
    }
    let ev = BaseEval::new(spec, base, u)?;
    let fw = FlowWeights::exact(spec, &base.grid)?;
    let grid = base.grid;
    let range = win.steps(&grid)?;
    let ue = spike(u, win, &grid)?;
    let (d, m, n, lag) = (spec.state_dim, spec.noise_dim, grid.steps, grid.lag);
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = (0..base.paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    spec.new_jets(),
                    spec.new_jets(),
                    NodeArgs::new(d),
                    [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
                    PrefixSum::new(grid.history_nodes(), d),
                    PrefixSum::new(grid.history_nodes(), d),
                )
            },
            |(jets, jv, a, buf, py, pz), p| {
                let lhs: f64 = (0..d).map(|c| adj.p(p, n)[c] * z.terminal(p)[c]).sum();
                let (ys, zs) = (y.path(p), z.path(p));
                let [yb, ysg, zl] = buf;
                py.reset();
                pz.reset();
                let mut terms = Vec::with_capacity(n);
                for i in 0..n {
                    py.extend(ys, i + lag);
                    pz.extend(zs, i + lag);
                    ev.args(p, i, a);
                    ev.coefficients(i, u.at(p, i), a, Order::Second, jets);
                    fw.b.apply_prefix(ys, py, d, i + lag, yb);
                    fw.sigma.apply_prefix(ys, py, d, i + lag, ysg);
                    ev.weights.ell.apply_prefix(zs, pz, d, i + lag, zl);
                    let yi = y.at(p, i as isize);
                    let zi = z.at(p, i as isize);
                    let spiked = range.contains(&i);
                    if spiked {
                        ev.coefficients(i, ue.at(p, i), a, Order::First, jv);
                    }
                    let pn = adj.p(p, i + 1);
                    let qi = adj.q(p, i);
                    let mut s = 0.0;
                    for c in 0..d {
                        s -= jets.ell.dx[c] * zi[c] + jets.ell.dy[c] * zl[c];
                    }
                    for j in 0..d {
                        let mut fb = 0.5 * quad(&jets.b, yi, yb, j);
                        if spiked {
                            fb += jv.b.value[j] - jets.b.value[j];
                        }
                        s += pn[j] * fb;
                        for k in 0..m {
                            let o = j * m + k;
                            let mut fs = 0.5 * quad(&jets.sigma, yi, ysg, o);
                            if spiked {
                                fs += add_linear(&jv.sigma, yi, ysg, o) - add_linear(&jets.sigma, yi, ysg, o);
                            }
                            s += qi[o] * fs;
                        }
                    }
                    terms.push(s * grid.dt);
                }
                (lhs, crate::stats::pairwise_sum(&terms))
            },
        )
        .unzip();
    Ok(DualityReport::from_paths(&lhs, &rhs))
}
