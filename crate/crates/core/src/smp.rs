//! Hamiltonian, the probabilistic representation of the second-order adjoint, and the
//! maximum-principle and cost-expansion checks.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absde::{is_deterministic, state_features, AdjointSolution};
use crate::error::{Error, Result};
use crate::measures::{NodeWeights, PrefixSum};
use crate::model::{ControlPath, Jet, Jets, Order, ProblemSpec};
use crate::paths::{BrownianBundle, TimeGrid};
use crate::regression::{Basis, RegressionConfig};
use crate::sdde::{
    control_id, cost_per_path, linear_flow_path, simulate_spiked, spike, BaseEval, FlowScratch, FlowWeights, Label,
    NodeArgs, SpikeWindow, TimeRule, TrajectoryBundle,
};
use crate::stats::{control_variate_mean, loglog_slope, mean_stderr, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "n")]
pub enum KernelMethod {
    Representation,
    MatrixBsde,
    Mollified(usize),
}

/// Symmetric `d × d` matrices on a set of times, with per-entry Monte Carlo errors.
#[derive(Debug, Clone, Serialize)]
pub struct SecondOrderKernel {
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `d × d` per time.
    pub matrices: Vec<Vec<f64>>,
    pub std_errors: Vec<Vec<f64>>,
    pub method: KernelMethod,
}

impl SecondOrderKernel {
    /// Index of the stored time closest to `t`, if within `tol`.
    pub fn index_near(&self, t: f64, tol: f64) -> Option<usize> {
        let (k, gap) = self
            .times
            .iter()
            .enumerate()
            .map(|(k, s)| (k, (s - t).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        (gap <= tol).then_some(k)
    }

    /// The matrix in force at `t`: the latest stored time not after `t`.
    pub fn at(&self, t: f64) -> Result<(&[f64], &[f64])> {
        let tol = 1e-9 * t.abs().max(1.0);
        let k = self
            .times
            .iter()
            .rposition(|&s| s <= t + tol)
            .ok_or_else(|| Error::Coverage(format!("no kernel time at or before {t}")))?;
        Ok((&self.matrices[k], &self.std_errors[k]))
    }

    /// `ε·P` for every stored matrix; errors scale by `|ε|`.
    pub fn scaled(&self, eps: f64) -> Self {
        let mut out = self.clone();
        for m in out.matrices.iter_mut() {
            m.iter_mut().for_each(|v| *v *= eps);
        }
        for m in out.std_errors.iter_mut() {
            m.iter_mut().for_each(|v| *v *= eps.abs());
        }
        out
    }

    /// Largest `|P_ij − P_ji| / (3·√(se_ij² + se_ji²))` over times and entries, with
    /// exact symmetry counted as zero.
    pub fn symmetry_ratio(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0_f64;
        for (m, s) in self.matrices.iter().zip(&self.std_errors) {
            for a in 0..d {
                for b in 0..a {
                    let gap = (m[a * d + b] - m[b * d + a]).abs();
                    if gap == 0.0 {
                        continue;
                    }
                    let se = (s[a * d + b].powi(2) + s[b * d + a].powi(2)).sqrt();
                    worst = worst.max(if se > 0.0 { gap / (3.0 * se) } else { f64::INFINITY });
                }
            }
        }
        worst
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,i,j,value,stderr")?;
        let d = self.dim;
        for ((t, m), s) in self.times.iter().zip(&self.matrices).zip(&self.std_errors) {
            for a in 0..d {
                for b in 0..d {
                    writeln!(out, "{t},{a},{b},{:e},{:e}", m[a * d + b], s[a * d + b])?;
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------------------------
// Hamiltonian

/// `b·p₀ + Σ_k σ^k·q₀^k − ℓ` at one point; `q₀` holds entry `(j, k)` at `j*m + k`.
pub fn hamiltonian(spec: &ProblemSpec, t: f64, args: &NodeArgs, u: &[f64], p0: &[f64], q0: &[f64]) -> f64 {
    let mut jets = spec.new_jets();
    spec.drift.eval(t, &args.x, &args.yb, u, Order::Value, &mut jets.b);
    spec.diffusion.eval(t, &args.x, &args.ys, u, Order::Value, &mut jets.sigma);
    spec.running_cost.eval(t, &args.x, &args.yl, u, Order::Value, &mut jets.ell);
    let drift: f64 = jets.b.value.iter().zip(p0).map(|(b, p)| b * p).sum();
    let noise: f64 = jets.sigma.value.iter().zip(q0).map(|(s, q)| s * q).sum();
    drift + noise - jets.ell.value[0]
}

// ---------------------------------------------------------------------------------------------
// Representation of the second-order adjoint

/// `Σ ψ_xx v₁ v₂ + ψ_xy (v₁ w₂ + v₂ w₁) + ψ_yy w₁ w₂` for output `o`.
#[inline]
fn mixed(jet: &Jet, o: usize, v1: &[f64], w1: &[f64], v2: &[f64], w2: &[f64]) -> f64 {
    let d = jet.dim;
    let mut s = 0.0;
    for a in 0..d {
        for b in 0..d {
            let k = (o * d + a) * d + b;
            s += jet.dxx[k] * v1[a] * v2[b] + jet.dxy[k] * (v1[a] * w2[b] + v2[a] * w1[b]) + jet.dyy[k] * w1[a] * w2[b];
        }
    }
    s
}

/// Linearized flows, the anticipated adjoint and the bundle they share.
pub struct Representation<'a> {
    pub ev: BaseEval<'a>,
    pub adj: &'a AdjointSolution,
    pub w: &'a BrownianBundle,
    pub flow: FlowWeights,
    ell: NodeWeights,
}

impl<'a> Representation<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        base: &'a TrajectoryBundle,
        u: &'a ControlPath,
        adj: &'a AdjointSolution,
        w: &'a BrownianBundle,
    ) -> Result<Self> {
        let flow = FlowWeights::exact(spec, &base.grid)?;
        Self::with_flow(spec, base, u, adj, w, flow)
    }

    /// Flows and Hessians read through the `n`-th mollification of `μ_b`, `μ_σ`.
    pub fn mollified(
        spec: &'a ProblemSpec,
        base: &'a TrajectoryBundle,
        u: &'a ControlPath,
        adj: &'a AdjointSolution,
        w: &'a BrownianBundle,
        n: usize,
    ) -> Result<Self> {
        let flow = FlowWeights::mollified(spec, &base.grid, n)?;
        Self::with_flow(spec, base, u, adj, w, flow)
    }

    fn with_flow(
        spec: &'a ProblemSpec,
        base: &'a TrajectoryBundle,
        u: &'a ControlPath,
        adj: &'a AdjointSolution,
        w: &'a BrownianBundle,
        flow: FlowWeights,
    ) -> Result<Self> {
        if base.grid != w.grid || base.paths != w.paths || base.provenance.seed != w.seed {
            return Err(Error::Consistency("base trajectory was not simulated on this bundle".into()));
        }
        if adj.grid != base.grid || adj.seed != w.seed || adj.control != control_id(u) || adj.paths != base.paths {
            return Err(Error::Consistency("adjoint was solved along a different base".into()));
        }
        let ev = BaseEval::new(spec, base, u)?;
        let ell = ev.weights.ell.clone();
        Ok(Self { ev, adj, w, flow, ell })
    }

    pub fn grid(&self) -> TimeGrid {
        self.ev.grid
    }

    /// Mixed forms `Ψ_ab` of the flows started from `dirs[a]` at node `start`, per path
    /// (`paths × K²`, row-major).
    pub fn samples(&self, start: usize, dirs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let spec = self.ev.spec;
        let grid = self.grid();
        if start > grid.steps {
            return Err(Error::Domain("start time beyond the horizon".into()));
        }
        let d = spec.state_dim;
        if let Some(h) = dirs.iter().find(|h| h.len() != d) {
            return Err(Error::Shape(format!("direction has length {}, state has {d}", h.len())));
        }
        let kk = dirs.len();
        let paths = self.ev.base.paths;
        let mut out = vec![0.0; paths * kk * kk];
        let failures: Vec<Option<usize>> = out
            .par_chunks_mut(kk * kk)
            .enumerate()
            .map_init(
                || Scratch::new(spec, grid, kk),
                |sc, (p, psi)| self.path_samples(p, start, dirs, psi, sc),
            )
            .collect();
        if let Some((p, step)) = failures.iter().enumerate().find_map(|(p, f)| f.map(|s| (p, s))) {
            return Err(Error::Divergence { step, path: p });
        }
        Ok(out)
    }

    fn path_samples(&self, p: usize, start: usize, dirs: &[Vec<f64>], psi: &mut [f64], sc: &mut Scratch) -> Option<usize> {
        let ev = &self.ev;
        let grid = ev.grid;
        let (d, lag, n) = (ev.spec.state_dim, grid.lag, grid.steps);
        let kk = dirs.len();
        let nodes = grid.history_nodes();
        for (a, h) in dirs.iter().enumerate() {
            let series = &mut sc.series[a * nodes * d..(a + 1) * nodes * d];
            series.fill(0.0);
            series[(start + lag) * d..(start + lag + 1) * d].copy_from_slice(h);
            if let Some(s) = linear_flow_path(ev, &self.flow, self.w, p, start, series, &mut sc.flow) {
                return Some(s);
            }
            sc.prefix[a].reset();
            sc.prefix[a].extend(series, n + lag);
        }
        psi.fill(0.0);
        let use_ell = !self.ell.is_zero();
        for i in start..n {
            let end = i + lag;
            ev.args(p, i, &mut sc.args);
            ev.coefficients(i, ev.control.at(p, i), &sc.args, Order::Second, &mut sc.jets);
            let pn = self.adj.p(p, i + 1);
            let qi = self.adj.q(p, i);
            for a in 0..kk {
                let series = &sc.series[a * nodes * d..(a + 1) * nodes * d];
                let (yb, rest) = sc.reads.split_at_mut(kk * d);
                let (ys, yl) = rest.split_at_mut(kk * d);
                self.flow.b.apply_prefix(series, &sc.prefix[a], d, end, &mut yb[a * d..(a + 1) * d]);
                self.flow.sigma.apply_prefix(series, &sc.prefix[a], d, end, &mut ys[a * d..(a + 1) * d]);
                if use_ell {
                    self.ell.apply(series, d, end, &mut yl[a * d..(a + 1) * d]);
                }
            }
            let m = ev.spec.noise_dim;
            for a in 0..kk {
                for b in a..kk {
                    let ya = &sc.series[(a * nodes + end) * d..(a * nodes + end + 1) * d];
                    let yb_ = &sc.series[(b * nodes + end) * d..(b * nodes + end + 1) * d];
                    let r = |k: usize, c: usize| &sc.reads[(k * kk + c) * d..(k * kk + c + 1) * d];
                    let mut v = 0.0;
                    for j in 0..d {
                        if pn[j] != 0.0 {
                            v += pn[j] * mixed(&sc.jets.b, j, ya, r(0, a), yb_, r(0, b));
                        }
                    }
                    for o in 0..d * m {
                        if qi[o] != 0.0 {
                            v += qi[o] * mixed(&sc.jets.sigma, o, ya, r(1, a), yb_, r(1, b));
                        }
                    }
                    v += mixed(&sc.jets.ell, 0, ya, r(2, a), yb_, r(2, b));
                    psi[a * kk + b] += grid.dt * v;
                }
            }
        }
        ev.args(p, n, &mut sc.args);
        ev.terminal(&sc.args, Order::Second, &mut sc.jets);
        let zero = vec![0.0; d];
        for a in 0..kk {
            for b in a..kk {
                let ya = &sc.series[(a * nodes + n + lag) * d..(a * nodes + n + lag + 1) * d];
                let yb_ = &sc.series[(b * nodes + n + lag) * d..(b * nodes + n + lag + 1) * d];
                psi[a * kk + b] += mixed(&sc.jets.h, 0, ya, &zero, yb_, &zero);
                psi[b * kk + a] = psi[a * kk + b];
            }
        }
        if psi.iter().all(|v| v.is_finite()) {
            None
        } else {
            Some(n)
        }
    }

    /// Regression-conditioned `P₀₀(s)` per path (`paths × d²`) for `s` at node `start`.
    pub fn conditional(&self, start: usize, cfg: &RegressionConfig) -> Result<Vec<f64>> {
        let d = self.ev.spec.state_dim;
        let psi = self.samples(start, &unit_directions(d))?;
        let paths = self.ev.base.paths;
        if start == 0 || is_deterministic(self.ev.base, self.ev.control) {
            let mut mean = vec![0.0; d * d];
            for (e, m) in mean.iter_mut().enumerate() {
                let col: Vec<f64> = (0..paths).map(|p| psi[p * d * d + e]).collect();
                *m = crate::stats::mean(&col);
            }
            return Ok(mean.repeat(paths));
        }
        let (raw, r) = state_features(&self.ev, start);
        let basis = Basis::build(&raw, r, paths, cfg, start)?;
        Ok(basis.project(&psi, d * d))
    }
}

struct Scratch {
    flow: FlowScratch,
    jets: Jets,
    args: NodeArgs,
    series: Vec<f64>,
    prefix: Vec<PrefixSum>,
    /// Past integrals per direction: `b`, then `σ`, then `ℓ`.
    reads: Vec<f64>,
}

impl Scratch {
    fn new(spec: &ProblemSpec, grid: TimeGrid, kk: usize) -> Self {
        let d = spec.state_dim;
        let nodes = grid.history_nodes();
        Self {
            flow: FlowScratch::new(spec, grid),
            jets: spec.new_jets(),
            args: NodeArgs::new(d),
            series: vec![0.0; kk * nodes * d],
            prefix: (0..kk).map(|_| PrefixSum::new(nodes, d)).collect(),
            reads: vec![0.0; 3 * kk * d],
        }
    }
}

fn unit_directions(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|a| {
            let mut e = vec![0.0; d];
            e[a] = 1.0;
            e
        })
        .collect()
}

fn column_estimates(samples: &[f64], cols: usize) -> Vec<Estimate> {
    let rows = samples.len() / cols;
    (0..cols)
        .map(|c| {
            let col: Vec<f64> = (0..rows).map(|p| samples[p * cols + c]).collect();
            mean_stderr(&col)
        })
        .collect()
}

/// `⟨P₀₀(s) h, h⟩` averaged over the paths.
pub fn p00_quadratic_form(rep: &Representation, s: f64, h: &[f64]) -> Result<Estimate> {
    let start = rep.grid().index_of(s)?;
    let psi = rep.samples(start, &[h.to_vec()])?;
    Ok(mean_stderr(&psi))
}

/// `P₀₀(s)` from the mixed forms of the `d` unit-direction flows on the same bundle.
pub fn p00_matrix(rep: &Representation, s: f64) -> Result<SecondOrderKernel> {
    p00_kernel(rep, &[s])
}

/// `P₀₀` at several times.
pub fn p00_kernel(rep: &Representation, times: &[f64]) -> Result<SecondOrderKernel> {
    let d = rep.ev.spec.state_dim;
    let dirs = unit_directions(d);
    let mut matrices = Vec::with_capacity(times.len());
    let mut std_errors = Vec::with_capacity(times.len());
    for &s in times {
        let start = rep.grid().index_of(s)?;
        let est = column_estimates(&rep.samples(start, &dirs)?, d * d);
        matrices.push(est.iter().map(|e| e.mean).collect());
        std_errors.push(est.iter().map(|e| e.stderr).collect());
    }
    Ok(SecondOrderKernel {
        dim: d,
        times: times.to_vec(),
        matrices,
        std_errors,
        method: match rep.flow.mollification {
            Some(n) => KernelMethod::Mollified(n),
            None => KernelMethod::Representation,
        },
    })
}

/// The default checkpoints `{0, T/4, T/2, 3T/4, T}`.
pub fn checkpoint_times(grid: &TimeGrid) -> Result<Vec<f64>> {
    let times: Vec<f64> = (0..=4).map(|k| grid.horizon * k as f64 / 4.0).collect();
    for &t in &times {
        grid.index_of(t)?;
    }
    Ok(times)
}

// ---------------------------------------------------------------------------------------------
// Variational inequality

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InequalityConfig {
    /// Multiplier of the Monte Carlo error in the pass threshold.
    pub k: f64,
    pub abs_tol: f64,
    /// Fraction of grid times allowed to fail; `None` means `2/N`.
    pub time_fraction: Option<f64>,
}

impl Default for InequalityConfig {
    fn default() -> Self {
        Self { k: 3.0, abs_tol: 1e-3, time_fraction: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapEntry {
    pub t: f64,
    pub v_index: usize,
    pub v: Vec<f64>,
    /// Mean over paths of `ℋᵃ(u) − ℋᵃ(v) + ½ Σ δσᵀ P₀₀ δσ`.
    pub delta_h: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub t: f64,
    pub v: Vec<f64>,
    pub v_index: usize,
    pub gap: f64,
    pub stderr: f64,
    /// Competitors tied with the reported one.
    pub ties: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SMPReport {
    pub scenario: String,
    pub grid: TimeGrid,
    pub seed: u64,
    pub tolerance: f64,
    pub k: f64,
    /// Largest infimum-form gap `max_v (ℋᵃ(v) − ℋᵃ(u) − ½ δσᵀP₀₀δσ)` over the grid.
    pub worst_gap: f64,
    pub gap_stderr: f64,
    pub violations: Vec<Violation>,
    pub allowed_violations: usize,
    pub verdict: bool,
    #[serde(skip)]
    pub entries: Vec<GapEntry>,
}

impl SMPReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "t,v_index,v,delta_h,stderr")?;
        for e in &self.entries {
            let v: Vec<String> = e.v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{},{},{},{:e},{:e}", e.t, e.v_index, v.join(";"), e.delta_h, e.stderr)?;
        }
        Ok(())
    }
}

/// Sign turning a kernel into the representation convention (`P₀₀(T) = h_xx`).
fn kernel_sign(p: &SecondOrderKernel) -> f64 {
    match p.method {
        KernelMethod::Representation => 1.0,
        KernelMethod::MatrixBsde | KernelMethod::Mollified(_) => -1.0,
    }
}

fn check_coverage(p: &SecondOrderKernel, grid: &TimeGrid) -> Result<()> {
    let tol = 1e-9 * grid.horizon.max(1.0);
    let spacing = grid.horizon / 4.0 + tol;
    let ok = !p.times.is_empty()
        && p.times[0] <= tol
        && *p.times.last().unwrap() >= grid.horizon - tol
        && p.times.windows(2).all(|w| w[1] > w[0] && w[1] - w[0] <= spacing);
    if !ok {
        return Err(Error::Coverage(format!(
            "second-order kernel times {:?} do not cover [0, {}] with spacing at most T/4",
            p.times, grid.horizon
        )));
    }
    Ok(())
}

/// Per-path `Δℋ(tᵢ, v)` for every step `i` and control `v` (`steps × |U| × paths`).
fn delta_h(spec: &ProblemSpec, ev: &BaseEval, adj: &AdjointSolution, p00: &SecondOrderKernel) -> Result<Vec<f64>> {
    let grid = ev.grid;
    let (d, m) = (spec.state_dim, spec.noise_dim);
    let nu = spec.control_set.len();
    let paths = ev.base.paths;
    let sign = kernel_sign(p00);
    let mats: Vec<Vec<f64>> = (0..grid.steps)
        .map(|i| p00.at(grid.time(i as isize)).map(|(mm, _)| mm.iter().map(|v| sign * v).collect()))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; grid.steps * nu * paths];
    out.par_chunks_mut(nu * paths).enumerate().for_each_init(
        || (spec.new_jets(), spec.new_jets(), NodeArgs::new(d), vec![0.0; d]),
        |(ju, jv, a, ds), (i, block)| {
            let pm = &mats[i];
            for p in 0..paths {
                ev.args(p, i, a);
                ev.coefficients(i, ev.control.at(p, i), a, Order::Value, ju);
                let pn = adj.p(p, i + 1);
                let qi = adj.q(p, i);
                for k in 0..nu {
                    ev.coefficients(i, k, a, Order::Value, jv);
                    // ℋᵃ is built from (−pᵃ, −qᵃ).
                    let mut h = 0.0;
                    for j in 0..d {
                        h += (jv.b.value[j] - ju.b.value[j]) * pn[j];
                    }
                    for o in 0..d * m {
                        h += (jv.sigma.value[o] - ju.sigma.value[o]) * qi[o];
                    }
                    h += jv.ell.value[0] - ju.ell.value[0];
                    let mut quad = 0.0;
                    for kk in 0..m {
                        for j in 0..d {
                            ds[j] = jv.sigma.value[j * m + kk] - ju.sigma.value[j * m + kk];
                        }
                        for x in 0..d {
                            for y in 0..d {
                                quad += ds[x] * pm[x * d + y] * ds[y];
                            }
                        }
                    }
                    block[k * paths + p] = h + 0.5 * quad;
                }
            }
        },
    );
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { what: "Hamiltonian difference".into(), point: "grid".into() });
    }
    Ok(out)
}

/// Mean-form check of the second-order variational inequality on every grid time and
/// every control value.
pub fn check_variational_inequality(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    adj: &AdjointSolution,
    p00: &SecondOrderKernel,
    cfg: &InequalityConfig,
) -> Result<SMPReport> {
    let grid = base.grid;
    check_coverage(p00, &grid)?;
    if adj.grid != grid || adj.control != control_id(u) || adj.seed != base.provenance.seed {
        return Err(Error::Consistency("adjoint was solved along a different base".into()));
    }
    if p00.dim != spec.state_dim {
        return Err(Error::Shape("kernel dimension differs from the state".into()));
    }
    let ev = BaseEval::new(spec, base, u)?;
    let nu = spec.control_set.len();
    let paths = base.paths;
    let dh = delta_h(spec, &ev, adj, p00)?;
    let mut entries = Vec::with_capacity(grid.steps * nu);
    let mut violations = vec![];
    let mut worst = (f64::NEG_INFINITY, 0.0);
    for i in 0..grid.steps {
        let t = grid.time(i as isize);
        let mut best: Option<(usize, f64, f64)> = None;
        let mut ties = 0;
        for k in 0..nu {
            let est = mean_stderr(&dh[(i * nu + k) * paths..(i * nu + k + 1) * paths]);
            entries.push(GapEntry { t, v_index: k, v: spec.control_set[k].clone(), delta_h: est.mean, stderr: est.stderr });
            let gap = -est.mean;
            match best {
                Some((_, g, _)) if gap < g => {}
                Some((_, g, _)) if gap == g => ties += 1,
                _ => {
                    best = Some((k, gap, est.stderr));
                    ties = 0;
                }
            }
        }
        let (k, gap, se) = best.expect("control set is not empty");
        if gap > worst.0 {
            worst = (gap, se);
        }
        if gap > cfg.abs_tol + cfg.k * se {
            violations.push(Violation { t, v: spec.control_set[k].clone(), v_index: k, gap, stderr: se, ties });
        }
    }
    let fraction = cfg.time_fraction.unwrap_or(2.0 / grid.steps as f64);
    let allowed = (fraction * grid.steps as f64 + 1e-9).floor() as usize;
    Ok(SMPReport {
        scenario: spec.name.clone(),
        grid,
        seed: base.provenance.seed,
        tolerance: cfg.abs_tol,
        k: cfg.k,
        worst_gap: worst.0,
        gap_stderr: worst.1,
        verdict: violations.len() <= allowed,
        violations,
        allowed_violations: allowed,
        entries,
    })
}

// ---------------------------------------------------------------------------------------------
// Cost expansion

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionRow {
    pub eps: f64,
    /// `J(u) − J(u^ε)` with common random numbers.
    pub lhs: Estimate,
    /// First- and second-order prediction of the same difference.
    pub rhs: Estimate,
    pub remainder: Estimate,
    /// Remainder when the `½ δσᵀP₀₀δσ` term is left out.
    pub remainder_first_order: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionReport {
    pub start: f64,
    pub value: usize,
    pub rows: Vec<ExpansionRow>,
    /// Log-log slope of `|remainder|` against `ε`.
    pub slope: f64,
    pub slope_first_order: f64,
}

/// Second-order adjoint available to the expansion: one matrix for every path, or one
/// per path.
pub enum P00Field<'a> {
    Kernel(&'a SecondOrderKernel),
    /// `paths × d²` values in the representation convention at the window start.
    PerPath(&'a [f64]),
}

fn check_ladder(windows: &[SpikeWindow], grid: &TimeGrid) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Config("empty ε ladder".into()));
    }
    for w in windows {
        w.steps(grid)?;
    }
    let nested = windows.windows(2).all(|p| {
        p[0].start == p[1].start && p[0].value == p[1].value && p[1].width < p[0].width
    });
    if !nested {
        return Err(Error::Config(
            "spike windows must share start and value and have strictly decreasing widths".into(),
        ));
    }
    Ok(())
}

/// Compares `J(u) − J(u^ε)` with `−E Σ_{E_ε} [pᵃδb + qᵃδσ + δℓ + ½ Σ δσᵀP₀₀δσ] Δt` on a
/// nested ladder of spike windows.
pub fn cost_expansion_check(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    windows: &[SpikeWindow],
    adj: &AdjointSolution,
    p00: P00Field,
    w: &BrownianBundle,
) -> Result<ExpansionReport> {
    let grid = base.grid;
    check_ladder(windows, &grid)?;
    if base.label != Label::State || base.provenance.seed != w.seed || base.grid != w.grid {
        return Err(Error::Consistency("base trajectory was not simulated on this bundle".into()));
    }
    if adj.grid != grid || adj.control != control_id(u) || adj.seed != w.seed {
        return Err(Error::Consistency("adjoint was solved along a different base".into()));
    }
    let (d, m) = (spec.state_dim, spec.noise_dim);
    let paths = base.paths;
    let ev = BaseEval::new(spec, base, u)?;
    let start_t = windows[0].start;
    let (matrix_of, per_path): (Vec<f64>, bool) = match p00 {
        P00Field::Kernel(k) => {
            let s = kernel_sign(k);
            (k.at(start_t)?.0.iter().map(|v| s * v).collect(), false)
        }
        P00Field::PerPath(v) => {
            if v.len() != paths * d * d {
                return Err(Error::Shape("per-path second-order adjoint has the wrong size".into()));
            }
            (v.to_vec(), true)
        }
    };
    let base_cost = cost_per_path(spec, base, u, TimeRule::LeftPoint)?;
    let mut rows = Vec::with_capacity(windows.len());
    for win in windows {
        let range = win.steps(&grid)?;
        let eps = win.width;
        let ue = spike(u, win, &grid)?;
        let xe = simulate_spiked(spec, u, win, w)?;
        let spiked_cost = cost_per_path(spec, &xe, &ue, TimeRule::LeftPoint)?;
        // Per path: first-order term, second-order term, and zero-mean control variates built
        // from the window noise (its sum, its adjoint-weighted sum, and the centred square).
        let per: Vec<(f64, f64, Vec<f64>)> = (0..paths)
            .into_par_iter()
            .map_init(
                || (spec.new_jets(), spec.new_jets(), NodeArgs::new(d)),
                |(ju, jv, a), p| {
                    let pm = if per_path { &matrix_of[p * d * d..(p + 1) * d * d] } else { &matrix_of[..] };
                    let mut first = 0.0;
                    let mut second = 0.0;
                    let mut sum = vec![0.0; m];
                    let mut weighted = vec![0.0; m];
                    let mut curvature = vec![0.0; m];
                    for (step, i) in range.clone().enumerate() {
                        ev.args(p, i, a);
                        ev.coefficients(i, u.at(p, i), a, Order::Value, ju);
                        ev.coefficients(i, win.value, a, Order::Value, jv);
                        let pn = adj.p(p, i + 1);
                        let pi = adj.p(p, i);
                        let qi = adj.q(p, i);
                        let dw = w.increment(p, i);
                        let mut f = jv.ell.value[0] - ju.ell.value[0];
                        for j in 0..d {
                            f += (jv.b.value[j] - ju.b.value[j]) * pn[j];
                        }
                        for o in 0..d * m {
                            f += (jv.sigma.value[o] - ju.sigma.value[o]) * qi[o];
                        }
                        let mut s = 0.0;
                        for k in 0..m {
                            let mut sk = 0.0;
                            for x in 0..d {
                                let dx = jv.sigma.value[x * m + k] - ju.sigma.value[x * m + k];
                                weighted[k] += pi[x] * dx * dw[k];
                                for y in 0..d {
                                    let dy = jv.sigma.value[y * m + k] - ju.sigma.value[y * m + k];
                                    sk += dx * pm[x * d + y] * dy;
                                }
                            }
                            if step == 0 {
                                curvature[k] = 0.5 * sk;
                            }
                            s += sk;
                            sum[k] += dw[k];
                        }
                        first += f * grid.dt;
                        second += 0.5 * s * grid.dt;
                    }
                    let mut controls = Vec::with_capacity(3 * m);
                    for k in 0..m {
                        controls.push(sum[k]);
                        controls.push(weighted[k]);
                        controls.push(curvature[k] * (sum[k] * sum[k] - eps));
                    }
                    (first, second, controls)
                },
            )
            .collect();
        let lhs: Vec<f64> = base_cost.iter().zip(&spiked_cost).map(|(a, b)| a - b).collect();
        let rhs: Vec<f64> = per.iter().map(|(f, s, _)| -(f + s)).collect();
        let rem: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let rem1: Vec<f64> = lhs.iter().zip(&per).map(|(a, (f, _, _))| a + f).collect();
        let controls: Vec<f64> = per.iter().flat_map(|(_, _, n)| n.clone()).collect();
        rows.push(ExpansionRow {
            eps,
            lhs: mean_stderr(&lhs),
            rhs: mean_stderr(&rhs),
            remainder: control_variate_mean(&rem, &controls, 3 * m),
            remainder_first_order: control_variate_mean(&rem1, &controls, 3 * m),
        });
    }
    let eps: Vec<f64> = rows.iter().map(|r| r.eps).collect();
    let r2: Vec<f64> = rows.iter().map(|r| r.remainder.mean).collect();
    let r1: Vec<f64> = rows.iter().map(|r| r.remainder_first_order.mean).collect();
    Ok(ExpansionReport {
        start: start_t,
        value: windows[0].value,
        slope: if rows.len() > 1 { loglog_slope(&eps, &r2) } else { f64::NAN },
        slope_first_order: if rows.len() > 1 { loglog_slope(&eps, &r1) } else { f64::NAN },
        rows,
    })
}

// ---------------------------------------------------------------------------------------------
// Mollification study

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub value: Estimate,
    /// `value − exact` with the paired standard error.
    pub error: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub s: f64,
    pub h: Vec<f64>,
    pub exact: Estimate,
    pub rows: Vec<ConvergenceRow>,
    /// `|error|` strictly decreasing along the list of `n`.
    pub decreasing: bool,
}

/// `⟨P₀₀ⁿ(s) h, h⟩` for each `n` against the exact-measure value on the same bundle.
#[allow(clippy::too_many_arguments)]
pub fn p00_convergence_study(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    adj: &AdjointSolution,
    w: &BrownianBundle,
    s: f64,
    h: &[f64],
    n_list: &[usize],
) -> Result<ConvergenceReport> {
    let exact_rep = Representation::new(spec, base, u, adj, w)?;
    let start = base.grid.index_of(s)?;
    let exact = exact_rep.samples(start, &[h.to_vec()])?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let rep = Representation::mollified(spec, base, u, adj, w, n)?;
        let v = rep.samples(start, &[h.to_vec()])?;
        let diff: Vec<f64> = v.iter().zip(&exact).map(|(a, b)| a - b).collect();
        rows.push(ConvergenceRow { n, value: mean_stderr(&v), error: mean_stderr(&diff) });
    }
    let decreasing = rows.windows(2).all(|r| r[1].error.mean.abs() < r[0].error.mean.abs());
    Ok(ConvergenceReport { s, h: h.to_vec(), exact: mean_stderr(&exact), rows, decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absde::solve_absde;
    use crate::model::{scenario_lq_delay, scenario_tracking, History, LqDelayParams, MeasureChoice};
    use crate::paths::{make_grid, sample_brownian};
    use crate::sdde::simulate_state;
    use std::sync::Arc;

    struct Run {
        spec: ProblemSpec,
        x: TrajectoryBundle,
        u: ControlPath,
        w: BrownianBundle,
        adj: AdjointSolution,
    }

    fn run_with(spec: ProblemSpec, n: usize, paths: usize, u: Option<ControlPath>) -> Run {
        let g = make_grid(spec.horizon, n, spec.delay).unwrap();
        let w = sample_brownian(g, paths, spec.noise_dim, 5).unwrap();
        let u = u.unwrap_or_else(|| ControlPath::constant(n, 0));
        let x = simulate_state(&spec, &u, &w).unwrap();
        let adj = solve_absde(&spec, &x, &u, &w, &RegressionConfig::default()).unwrap();
        Run { spec, x, u, w, adj }
    }

    impl Run {
        fn rep(&self) -> Representation<'_> {
            Representation::new(&self.spec, &self.x, &self.u, &self.adj, &self.w).unwrap()
        }
    }

    #[test]
    fn hamiltonian_is_the_displayed_sum() {
        let mut spec = scenario_lq_delay(&LqDelayParams::default()).unwrap();
        spec.state_dim = 2;
        spec.history = History::Constant(vec![0.0, 0.0]);
        spec.drift = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = 1.0;
            j.value[1] = 2.0;
        });
        spec.diffusion = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = 1.0;
            j.value[1] = 1.0;
        });
        spec.running_cost = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = 5.0;
        });
        let a = NodeArgs::new(2);
        assert_eq!(hamiltonian(&spec, 0.0, &a, &[0.0], &[3.0, 4.0], &[1.0, 1.0]), 8.0);
        let zero = |_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, _j: &mut Jet| {};
        spec.drift = Arc::new(zero);
        spec.diffusion = Arc::new(zero);
        spec.running_cost = Arc::new(zero);
        assert_eq!(hamiltonian(&spec, 0.0, &a, &[0.0], &[3.0, 4.0], &[1.0, 1.0]), 0.0);
    }

    fn frozen(state_weight: f64, terminal_weight: f64) -> ProblemSpec {
        scenario_lq_delay(&LqDelayParams { b_u: 0.0, state_weight, terminal_weight, ..Default::default() }).unwrap()
    }

    #[test]
    fn frozen_flow_gives_the_terminal_hessian_plus_running_hessian() {
        let r = run_with(frozen(0.0, 1.5), 16, 4, None);
        let v = p00_quadratic_form(&r.rep(), 0.25, &[2.0]).unwrap();
        assert_eq!(v.mean, 3.0 * 4.0);
        let r = run_with(frozen(0.5, 1.5), 16, 4, None);
        let v = p00_quadratic_form(&r.rep(), 0.25, &[2.0]).unwrap();
        assert!((v.mean - (12.0 + 0.75 * 1.0 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn geometric_flow_second_moment_matches_the_closed_form() {
        let gamma: f64 = 0.5;
        let p = LqDelayParams { b_u: 0.0, s0: gamma, x0: 0.0, state_weight: 0.0, terminal_weight: 0.5, mu_b: MeasureChoice::None, mu_sigma: MeasureChoice::None, ..Default::default() };
        let r = run_with(scenario_lq_delay(&p).unwrap(), 64, 20000, None);
        let rep = r.rep();
        for s in [0.0, 0.5] {
            let v = p00_quadratic_form(&rep, s, &[1.0]).unwrap();
            let exact = (gamma * gamma * (1.0 - s)).exp();
            assert!((v.mean - exact).abs() < 3.0 * v.stderr + 0.01, "s={s}: {v:?} vs {exact}");
        }
    }

    #[test]
    fn polarization_and_scaling_are_exact_on_a_shared_bundle() {
        let p = LqDelayParams { a0: 0.3, a1: -0.4, s0: 0.4, s1: 0.2, kappa_b: 0.5, kappa_sigma: 0.3, mu_b: MeasureChoice::Uniform, ..Default::default() };
        let r = run_with(scenario_lq_delay(&p).unwrap(), 32, 400, None);
        let rep = r.rep();
        let m = p00_matrix(&rep, 0.25).unwrap();
        let q = p00_quadratic_form(&rep, 0.25, &[1.0]).unwrap();
        assert_eq!(m.matrices[0][0], q.mean);
        let q2 = p00_quadratic_form(&rep, 0.25, &[2.0]).unwrap();
        assert_eq!(q2.mean, 4.0 * q.mean);
        let q3 = p00_quadratic_form(&rep, 0.25, &[3.0]).unwrap();
        assert!((q3.mean - 9.0 * q.mean).abs() < 1e-12 * q3.mean.abs());
    }

    fn tracking(controls: Vec<f64>) -> ProblemSpec {
        let p = LqDelayParams {
            a0: 0.2,
            s0: 0.3,
            controls,
            target: vec![(0.0, 1.0), (0.5, -1.0)],
            ..Default::default()
        };
        scenario_tracking(&p).unwrap()
    }

    fn gamma(t: f64) -> Vec<f64> {
        vec![if t < 0.5 { 1.0 } else { -1.0 }]
    }

    fn check(r: &Run) -> SMPReport {
        let kern = p00_kernel(&r.rep(), &checkpoint_times(&r.x.grid).unwrap()).unwrap();
        check_variational_inequality(&r.spec, &r.x, &r.u, &r.adj, &kern, &InequalityConfig::default()).unwrap()
    }

    #[test]
    fn analytic_optimum_passes_and_a_wrong_constant_fails() {
        let spec = tracking(vec![-1.0, 0.0, 1.0]);
        let g = make_grid(1.0, 16, 1.0).unwrap();
        let u = ControlPath::from_fn(&spec, &g, gamma).unwrap();
        let r = run_with(spec.clone(), 16, 200, Some(u));
        let rep = check(&r);
        assert!(rep.verdict);
        assert!(rep.worst_gap.abs() < 1e-12);
        let r = run_with(spec, 16, 200, Some(ControlPath::constant(16, 1)));
        let rep = check(&r);
        assert!(!rep.verdict);
        assert!((rep.worst_gap - 1.0).abs() < 1e-12);
        assert_eq!(rep.violations.len(), 16);
    }

    #[test]
    fn singleton_control_set_passes() {
        let spec = LqDelayParams { controls: vec![1.0], target: vec![(0.0, 1.0)], ..Default::default() };
        let r2 = run_with(scenario_tracking(&spec).unwrap(), 16, 600, None);
        assert!(check(&r2).verdict);
    }

    #[test]
    fn constant_in_the_running_cost_leaves_every_gap_unchanged() {
        let spec = tracking(vec![-1.0, 0.0, 1.0]);
        let r = run_with(spec.clone(), 16, 600, Some(ControlPath::constant(16, 1)));
        let a = check(&r);
        let mut shifted = spec;
        let old = shifted.running_cost.clone();
        shifted.running_cost = Arc::new(move |t: f64, x: &[f64], y: &[f64], u: &[f64], o: Order, j: &mut Jet| {
            old.eval(t, x, y, u, o, j);
            j.value[0] += 7.0;
        });
        let r2 = run_with(shifted, 16, 600, Some(ControlPath::constant(16, 1)));
        let b = check(&r2);
        for (e, f) in a.entries.iter().zip(&b.entries) {
            assert_eq!(e.delta_h.to_bits(), f.delta_h.to_bits());
        }
    }

    #[test]
    fn kernel_with_holes_is_a_coverage_error() {
        let r = run_with(tracking(vec![-1.0, 1.0]), 16, 600, None);
        let kern = p00_kernel(&r.rep(), &[0.0, 0.5]).unwrap();
        let e = check_variational_inequality(&r.spec, &r.x, &r.u, &r.adj, &kern, &InequalityConfig::default());
        assert!(matches!(e, Err(Error::Coverage(_))));
    }

    #[test]
    fn control_free_problem_has_zero_expansion() {
        let p = LqDelayParams { a0: 0.3, s0: 0.2, b_u: 0.0, controls: vec![-1.0, 1.0], ..Default::default() };
        let r = run_with(scenario_lq_delay(&p).unwrap(), 32, 600, None);
        let kern = p00_kernel(&r.rep(), &checkpoint_times(&r.x.grid).unwrap()).unwrap();
        let ladder: Vec<SpikeWindow> = [0.25, 0.125].iter().map(|&e| SpikeWindow { start: 0.25, width: e, value: 1 }).collect();
        let rep = cost_expansion_check(&r.spec, &r.x, &r.u, &ladder, &r.adj, P00Field::Kernel(&kern), &r.w).unwrap();
        for row in &rep.rows {
            assert_eq!(row.lhs.mean, 0.0);
            assert_eq!(row.rhs.mean, 0.0);
        }
        let bad: Vec<SpikeWindow> = [0.125, 0.25].iter().map(|&e| SpikeWindow { start: 0.25, width: e, value: 1 }).collect();
        let e = cost_expansion_check(&r.spec, &r.x, &r.u, &bad, &r.adj, P00Field::Kernel(&kern), &r.w);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn zero_linearized_dynamics_is_mollification_invariant() {
        let r = run_with(frozen(0.0, 1.0), 32, 50, None);
        let rep = p00_convergence_study(&r.spec, &r.x, &r.u, &r.adj, &r.w, 0.0, &[1.0], &[4, 8]).unwrap();
        assert_eq!(rep.exact.mean, 2.0);
        for row in &rep.rows {
            assert_eq!(row.value.mean, 2.0);
        }
    }
}
