//! Product-space formulation for delay measures with densities: points `(x₀, x₁)` of
//! `ℝᵈ ⊕ L²([-d, 0])` on the θ-grid, the shift semigroup, operator coefficients, and the
//! first and second adjoint equations in that space.
//!
//! A discretized point is stored as `D = d(L+2)` numbers: the head followed by the `L+1`
//! tail nodes. Past integrals read the present value from the head, so the last tail node
//! only matters for the inner product. Bilinear forms are stored as the Euclidean matrix
//! `M = W P` with `W` the diagonal of inner-product weights, so `⟨Ph, k⟩ = hᵀ M k` and
//! weighted symmetry of `P` is plain symmetry of `M`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::absde::{is_deterministic, state_features, AdjointSolution};
use crate::error::{Error, Result};
use crate::measures::NodeWeights;
use crate::model::{ControlPath, Jet, Order, ProblemSpec};
use crate::paths::{BrownianBundle, TimeGrid};
use crate::regression::{residual_rms, Basis, RegressionConfig, StepDiagnostics};
use crate::sdde::{control_id, BaseEval, Label, NodeArgs, TrajectoryBundle};
use crate::smp::{KernelMethod, SecondOrderKernel};
use crate::stats::mean_stderr;

/// Symmetry drift (relative to the entry scale) tolerated before symmetrization.
pub const SYMMETRY_DRIFT_TOL: f64 = 1e-6;

fn tail_weights(lag: usize, dt: f64) -> Vec<f64> {
    if lag == 0 {
        return vec![0.0];
    }
    (0..=lag).map(|j| if j == 0 || j == lag { 0.5 * dt } else { dt }).collect()
}

/// Block that block `blk` copies from under a shift by `k ≥ 1` steps (block 0 is the head,
/// block `1 + j` is tail node `j`).
#[inline]
fn shift_source(blk: usize, lag: usize, k: usize) -> usize {
    if blk == 0 || k == 0 {
        return blk;
    }
    let j = blk - 1;
    if j + k >= lag {
        0
    } else {
        blk + k
    }
}

// ---------------------------------------------------------------------------------------------
// Points

#[derive(Debug, Clone, PartialEq)]
pub struct HilbertPoint {
    pub head: Vec<f64>,
    /// Tail nodes `θ_j = -d + jΔt`, `j = 0..=L`, `d` values each.
    pub tail: Vec<f64>,
    pub grid: TimeGrid,
}

impl HilbertPoint {
    pub fn new(head: Vec<f64>, tail: Vec<f64>, grid: TimeGrid) -> Result<Self> {
        if tail.len() != (grid.lag + 1) * head.len() {
            return Err(Error::Shape(format!(
                "tail has {} values, expected {} nodes of dimension {}",
                tail.len(),
                grid.lag + 1,
                head.len()
            )));
        }
        Ok(Self { head, tail, grid })
    }

    pub fn zeros(d: usize, grid: TimeGrid) -> Self {
        Self { head: vec![0.0; d], tail: vec![0.0; (grid.lag + 1) * d], grid }
    }

    /// Head `head` and tail sampled from `f(θ)` on the θ-grid.
    pub fn from_fn(head: Vec<f64>, grid: TimeGrid, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let d = head.len();
        let mut tail = Vec::with_capacity((grid.lag + 1) * d);
        for j in 0..=grid.lag {
            let v = f(grid.time(j as isize - grid.lag as isize));
            assert_eq!(v.len(), d);
            tail.extend(v);
        }
        Self { head, tail, grid }
    }

    pub fn dim(&self) -> usize {
        self.head.len()
    }

    pub fn tail_node(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.tail[j * d..(j + 1) * d]
    }

    /// Head inner product plus the trapezoid rule on the tail.
    pub fn inner(&self, other: &HilbertPoint) -> f64 {
        self.to_vec()
            .iter()
            .zip(other.to_vec())
            .zip(Layout::new(self.dim(), &self.grid).weights)
            .map(|((a, b), w)| a * b * w)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    /// Flat layout `[head, tail_0, …, tail_L]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.head.clone();
        v.extend_from_slice(&self.tail);
        v
    }

    pub fn from_vec(v: &[f64], d: usize, grid: TimeGrid) -> Result<Self> {
        if v.len() != d * (grid.lag + 2) {
            return Err(Error::Shape(format!("flat point has {} values, expected {}", v.len(), d * (grid.lag + 2))));
        }
        Self::new(v[..d].to_vec(), v[d..].to_vec(), grid)
    }
}

/// `X(t) = (x(t), x(t + ·))` of one path of a trajectory.
pub fn lift(x: &TrajectoryBundle, path: usize, t: f64) -> Result<HilbertPoint> {
    let grid = x.grid;
    let i = grid.index_of(t)?;
    if i > grid.steps {
        return Err(Error::Domain(format!("time {t} beyond the horizon {}", grid.horizon)));
    }
    if path >= x.paths {
        return Err(Error::Shape(format!("path {path} of {}", x.paths)));
    }
    let lag = grid.lag as isize;
    let mut tail = Vec::with_capacity((grid.lag + 1) * x.dim);
    for j in 0..=lag {
        tail.extend_from_slice(x.at(path, i as isize - lag + j));
    }
    HilbertPoint::new(x.at(path, i as isize).to_vec(), tail, grid)
}

/// The shift semigroup: the tail is advanced by `t` and filled with the head.
pub fn shift_semigroup(t: f64, p: &HilbertPoint) -> Result<HilbertPoint> {
    let k = p.grid.index_of(t)?;
    let (d, lag) = (p.dim(), p.grid.lag);
    let mut out = p.clone();
    for j in 0..=lag {
        let src = shift_source(1 + j, lag, k);
        let v = if src == 0 { &p.head[..] } else { p.tail_node(src - 1) };
        out.tail[j * d..(j + 1) * d].copy_from_slice(v);
    }
    Ok(out)
}

/// Adjoint of the shift in the weighted inner product.
pub fn shift_adjoint(t: f64, p: &HilbertPoint) -> Result<HilbertPoint> {
    let k = p.grid.index_of(t)?;
    let d = p.dim();
    let layout = Layout::new(d, &p.grid);
    let v = p.to_vec();
    let mut out = vec![0.0; layout.dim];
    for blk in 0..layout.blocks() {
        let src = shift_source(blk, layout.lag, k);
        for a in 0..d {
            out[src * d + a] += layout.weights[blk * d + a] * v[blk * d + a];
        }
    }
    layout.unweight(&mut out);
    HilbertPoint::from_vec(&out, d, p.grid)
}

// ---------------------------------------------------------------------------------------------
// Layout and operator blocks

/// Index bookkeeping of the discretized product space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Layout {
    pub state_dim: usize,
    pub lag: usize,
    /// `D = d(L+2)`.
    pub dim: usize,
    /// Inner-product weight of every flat coordinate.
    pub weights: Vec<f64>,
}

impl Layout {
    pub fn new(d: usize, grid: &TimeGrid) -> Self {
        let mut weights = vec![1.0; d];
        for w in tail_weights(grid.lag, grid.dt) {
            weights.extend(std::iter::repeat(w).take(d));
        }
        Self { state_dim: d, lag: grid.lag, dim: d * (grid.lag + 2), weights }
    }

    pub fn blocks(&self) -> usize {
        self.lag + 2
    }

    /// Blocks and weights through which a past integral reads a point; the present value
    /// is read from the head.
    pub fn reader(&self, w: &NodeWeights) -> Vec<(usize, f64)> {
        w.nonzero()
            .iter()
            .map(|&(j, x)| (if j == self.lag { 0 } else { 1 + j }, x))
            .collect()
    }

    /// Divides by the weights; zero-weight coordinates map to zero.
    fn unweight(&self, v: &mut [f64]) {
        for (x, w) in v.iter_mut().zip(&self.weights) {
            *x = if *w > 0.0 { *x / w } else { 0.0 };
        }
    }

    /// `out += Sᵀc` for the one-step shift.
    fn add_shift_transpose(&self, c: &[f64], out: &mut [f64]) {
        let d = self.state_dim;
        for blk in 0..self.blocks() {
            let s = shift_source(blk, self.lag, 1);
            for a in 0..d {
                out[s * d + a] += c[blk * d + a];
            }
        }
    }

    /// `out = Sᵀ M S` for the one-step shift.
    fn shift_gram(&self, m: &[f64], out: &mut [f64]) {
        let (d, n) = (self.state_dim, self.dim);
        out.fill(0.0);
        for rb in 0..self.blocks() {
            let sr = shift_source(rb, self.lag, 1);
            for cb in 0..self.blocks() {
                let sc = shift_source(cb, self.lag, 1);
                for a in 0..d {
                    for b in 0..d {
                        out[(sr * d + a) * n + sc * d + b] += m[(rb * d + a) * n + cb * d + b];
                    }
                }
            }
        }
    }
}

/// Symmetric bilinear form on the discretized product space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorBlock {
    pub layout: Layout,
    /// `D × D`, row-major, inner-product weights included.
    pub matrix: Vec<f64>,
}

impl OperatorBlock {
    pub fn zeros(layout: &Layout) -> Self {
        Self { layout: layout.clone(), matrix: vec![0.0; layout.dim * layout.dim] }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn bilinear_flat(&self, h: &[f64], k: &[f64]) -> f64 {
        let n = self.dim();
        (0..n).map(|a| h[a] * (0..n).map(|b| self.matrix[a * n + b] * k[b]).sum::<f64>()).sum()
    }

    /// `⟨P h, k⟩`.
    pub fn bilinear(&self, h: &HilbertPoint, k: &HilbertPoint) -> f64 {
        self.bilinear_flat(&h.to_vec(), &k.to_vec())
    }

    /// `P h` as a point, so that `⟨P h, k⟩_H` equals [`Self::bilinear`].
    pub fn apply(&self, h: &HilbertPoint) -> Result<HilbertPoint> {
        let n = self.dim();
        let v = h.to_vec();
        let mut out: Vec<f64> = (0..n).map(|a| (0..n).map(|b| self.matrix[a * n + b] * v[b]).sum()).collect();
        self.layout.unweight(&mut out);
        HilbertPoint::from_vec(&out, self.layout.state_dim, h.grid)
    }

    pub fn symmetry_defect(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0_f64;
        for a in 0..n {
            for b in 0..a {
                worst = worst.max((self.matrix[a * n + b] - self.matrix[b * n + a]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix by its symmetric part and returns the defect removed.
    pub fn symmetrize(&mut self) -> f64 {
        let defect = self.symmetry_defect();
        let n = self.dim();
        symmetrize(&mut self.matrix, n);
        defect
    }

    /// Top-left `d × d` block.
    pub fn head_block(&self) -> Vec<f64> {
        let (d, n) = (self.layout.state_dim, self.dim());
        (0..d * d).map(|k| self.matrix[(k / d) * n + k % d]).collect()
    }

    /// Dense text dump, one row per line.
    pub fn write_dense(&self, out: &mut impl Write) -> Result<()> {
        let n = self.dim();
        for row in self.matrix.chunks(n) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn symmetrize(m: &mut [f64], n: usize) {
    for a in 0..n {
        for b in 0..a {
            let s = 0.5 * (m[a * n + b] + m[b * n + a]);
            m[a * n + b] = s;
            m[b * n + a] = s;
        }
    }
}

fn scale_of(m: &[f64]) -> f64 {
    m.iter().fold(1.0_f64, |s, v| s.max(v.abs()))
}

// ---------------------------------------------------------------------------------------------
// Operator coefficients

/// `out += s · ∂ψ_o` as a covector on the product space.
fn add_row(layout: &Layout, jet: &Jet, o: usize, reader: &[(usize, f64)], s: f64, out: &mut [f64]) {
    let d = layout.state_dim;
    for a in 0..d {
        out[a] += s * jet.dx[o * d + a];
        let dy = jet.dy[o * d + a];
        if dy != 0.0 {
            for &(blk, w) in reader {
                out[blk * d + a] += s * w * dy;
            }
        }
    }
}

/// `m += s · ∂²ψ_o` as a bilinear form on the product space.
fn add_hessian(layout: &Layout, jet: &Jet, o: usize, reader: &[(usize, f64)], s: f64, m: &mut [f64]) {
    let (d, n) = (layout.state_dim, layout.dim);
    let range = o * d * d..(o + 1) * d * d;
    let xx = &jet.dxx[range.clone()];
    let xy = &jet.dxy[range.clone()];
    let yy = &jet.dyy[range];
    for a in 0..d {
        for b in 0..d {
            m[a * n + b] += s * xx[a * d + b];
        }
    }
    if xy.iter().any(|&v| v != 0.0) {
        for a in 0..d {
            for b in 0..d {
                let v = s * xy[a * d + b];
                for &(blk, w) in reader {
                    m[a * n + blk * d + b] += v * w;
                    m[(blk * d + b) * n + a] += v * w;
                }
            }
        }
    }
    if yy.iter().any(|&v| v != 0.0) {
        for &(b1, w1) in reader {
            for &(b2, w2) in reader {
                for a in 0..d {
                    for b in 0..d {
                        m[(b1 * d + a) * n + b2 * d + b] += s * w1 * w2 * yy[a * d + b];
                    }
                }
            }
        }
    }
}

/// Operator coefficients at one node of one path.
#[derive(Debug, Clone)]
pub struct OperatorSet {
    /// `B_X`: `d` row maps of length `D`.
    pub bx: Vec<f64>,
    /// `Σ_X`: row map of output `(j, k)` at row `j*m + k`.
    pub sx: Vec<f64>,
    pub lx: Vec<f64>,
    pub bxx: Vec<OperatorBlock>,
    pub sxx: Vec<OperatorBlock>,
    pub lxx: OperatorBlock,
}

impl OperatorSet {
    /// `B_X h`.
    pub fn apply_bx(&self, h: &HilbertPoint) -> Vec<f64> {
        let v = h.to_vec();
        self.bx.chunks(v.len()).map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TerminalSet {
    pub hx: Vec<f64>,
    pub hxx: OperatorBlock,
}

struct Readers {
    b: Vec<(usize, f64)>,
    sigma: Vec<(usize, f64)>,
    ell: Vec<(usize, f64)>,
    h: Vec<(usize, f64)>,
}

/// Coefficients frozen along a base pair, with the measures read as densities on the θ-grid.
pub struct HilbertContext<'a> {
    pub ev: BaseEval<'a>,
    pub layout: Layout,
    pub mollification: Option<usize>,
    readers: Readers,
}

impl<'a> HilbertContext<'a> {
    /// `n = None` requires measures without atoms; `Some(n)` reads every measure through its
    /// `n`-th mollification while the coefficients stay evaluated along the base.
    pub fn new(spec: &'a ProblemSpec, base: &'a TrajectoryBundle, u: &'a ControlPath, n: Option<usize>) -> Result<Self> {
        let ev = BaseEval::new(spec, base, u)?;
        let grid = base.grid;
        let weights = match n {
            None => {
                if spec.has_atoms() {
                    return Err(Error::Pipeline(
                        "the product-space pipeline needs delay measures with densities; mollify the atoms first"
                            .into(),
                    ));
                }
                ev.weights.clone()
            }
            Some(n) => spec.mollified(n)?.weights(&grid)?,
        };
        let layout = Layout::new(spec.state_dim, &grid);
        let readers = Readers {
            b: layout.reader(&weights.b),
            sigma: layout.reader(&weights.sigma),
            ell: layout.reader(&weights.ell),
            h: layout.reader(&weights.h),
        };
        Ok(Self { ev, layout, mollification: n, readers })
    }

    fn eval(&self, path: usize, i: usize, order: Order, jets: &mut crate::model::Jets, a: &mut NodeArgs) {
        self.ev.args(path, i, a);
        self.ev.coefficients(i, self.ev.control.at(path, i), a, order, jets);
    }

    pub fn operators(&self, path: usize, i: usize) -> OperatorSet {
        let spec = self.ev.spec;
        let (d, m) = (spec.state_dim, spec.noise_dim);
        let l = &self.layout;
        let n = l.dim;
        let mut jets = spec.new_jets();
        let mut a = NodeArgs::new(d);
        self.eval(path, i, Order::Second, &mut jets, &mut a);
        let mut bx = vec![0.0; d * n];
        let mut bxx = vec![OperatorBlock::zeros(l); d];
        for j in 0..d {
            add_row(l, &jets.b, j, &self.readers.b, 1.0, &mut bx[j * n..(j + 1) * n]);
            add_hessian(l, &jets.b, j, &self.readers.b, 1.0, &mut bxx[j].matrix);
        }
        let mut sx = vec![0.0; d * m * n];
        let mut sxx = vec![OperatorBlock::zeros(l); d * m];
        for o in 0..d * m {
            add_row(l, &jets.sigma, o, &self.readers.sigma, 1.0, &mut sx[o * n..(o + 1) * n]);
            add_hessian(l, &jets.sigma, o, &self.readers.sigma, 1.0, &mut sxx[o].matrix);
        }
        let mut lx = vec![0.0; n];
        add_row(l, &jets.ell, 0, &self.readers.ell, 1.0, &mut lx);
        let mut lxx = OperatorBlock::zeros(l);
        add_hessian(l, &jets.ell, 0, &self.readers.ell, 1.0, &mut lxx.matrix);
        OperatorSet { bx, sx, lx, bxx, sxx, lxx }
    }

    pub fn terminal(&self, path: usize) -> TerminalSet {
        let spec = self.ev.spec;
        let l = &self.layout;
        let mut jets = spec.new_jets();
        let mut a = NodeArgs::new(spec.state_dim);
        self.ev.args(path, self.ev.grid.steps, &mut a);
        self.ev.terminal(&a, Order::Second, &mut jets);
        let mut hx = vec![0.0; l.dim];
        add_row(l, &jets.h, 0, &self.readers.h, 1.0, &mut hx);
        let mut hxx = OperatorBlock::zeros(l);
        add_hessian(l, &jets.h, 0, &self.readers.h, 1.0, &mut hxx.matrix);
        TerminalSet { hx, hxx }
    }
}

/// Operator coefficients of a density-measure problem at node `i` of one base path.
pub fn assemble_operators(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    path: usize,
    t: f64,
) -> Result<OperatorSet> {
    let ctx = HilbertContext::new(spec, base, u, None)?;
    let i = base.grid.index_of(t)?;
    if i >= base.grid.steps {
        return Err(Error::Domain(format!("operators are defined on [0, T), got {t}")));
    }
    Ok(ctx.operators(path, i))
}

fn check_bundle(base: &TrajectoryBundle, w: &BrownianBundle) -> Result<()> {
    if base.grid != w.grid || base.paths != w.paths || base.provenance.seed != w.seed {
        return Err(Error::Consistency("base trajectory was not simulated on this bundle".into()));
    }
    if base.label != Label::State && base.label != Label::Spiked {
        return Err(Error::Consistency("adjoint needs a state trajectory".into()));
    }
    Ok(())
}

fn fit_step(
    ev: &BaseEval,
    det: bool,
    targets: Vec<f64>,
    cols: usize,
    cfg: &RegressionConfig,
    i: usize,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    if det {
        return Ok((
            targets,
            StepDiagnostics { step: i, features: 1, condition: 1.0, residual: 0.0, deterministic: true },
        ));
    }
    let (raw, r) = state_features(ev, i);
    let basis = Basis::build(&raw, r, ev.base.paths, cfg, i)?;
    let fit = basis.project(&targets, cols);
    let residual = residual_rms(&targets, &fit, cols);
    Ok((
        fit,
        StepDiagnostics { step: i, features: basis.features, condition: basis.condition, residual, deterministic: false },
    ))
}

// ---------------------------------------------------------------------------------------------
// First adjoint

/// Product-space first adjoint, stored as covectors `W p`; only the head of `q` is kept.
#[derive(Debug, Clone)]
pub struct HilbertAdjoint {
    pub grid: TimeGrid,
    pub layout: Layout,
    pub paths: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub control: String,
    pub deterministic: bool,
    pub mollification: Option<usize>,
    pub diagnostics: Vec<StepDiagnostics>,
    c: Vec<f64>,
    q: Vec<f64>,
    rows: usize,
}

impl HilbertAdjoint {
    #[inline]
    fn row(&self, path: usize) -> usize {
        if self.rows == 1 {
            0
        } else {
            path
        }
    }

    /// `W p(tᵢ)` as a flat vector.
    pub fn covector(&self, path: usize, i: usize) -> &[f64] {
        let n = self.layout.dim;
        let k = (self.row(path) * (self.grid.steps + 1) + i) * n;
        &self.c[k..k + n]
    }

    pub fn p(&self, path: usize, i: usize) -> HilbertPoint {
        let mut v = self.covector(path, i).to_vec();
        self.layout.unweight(&mut v);
        HilbertPoint::from_vec(&v, self.layout.state_dim, self.grid).expect("layout matches grid")
    }

    /// `G* p(tᵢ)`.
    pub fn head(&self, path: usize, i: usize) -> &[f64] {
        &self.covector(path, i)[..self.layout.state_dim]
    }

    /// `G* q(tᵢ)`, entry `(j, k)` at `j*m + k`.
    pub fn q(&self, path: usize, i: usize) -> &[f64] {
        let dm = self.layout.state_dim * self.noise_dim;
        let k = (self.row(path) * (self.grid.steps + 1) + i) * dm;
        &self.q[k..k + dm]
    }

    pub fn mean_head(&self, i: usize) -> Vec<f64> {
        (0..self.layout.state_dim)
            .map(|c| {
                let col: Vec<f64> = (0..self.rows).map(|r| self.head(r, i)[c]).collect();
                crate::stats::mean(&col)
            })
            .collect()
    }
}

/// First adjoint of a density-measure problem.
pub fn solve_first_adjoint_h(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    w: &BrownianBundle,
    cfg: &RegressionConfig,
) -> Result<HilbertAdjoint> {
    let ctx = HilbertContext::new(spec, base, u, None)?;
    first_adjoint_with(&ctx, w, cfg)
}

/// Backward recursion `p(tᵢ) = S*[p̂ + Δt(B_X* G* p̂ + Σ Σ_X* G* q̂ − L_X)]`, the exact adjoint of
/// the Euler scheme of the lifted first variation.
pub fn first_adjoint_with(ctx: &HilbertContext, w: &BrownianBundle, cfg: &RegressionConfig) -> Result<HilbertAdjoint> {
    let ev = &ctx.ev;
    check_bundle(ev.base, w)?;
    let spec = ev.spec;
    let grid = ev.grid;
    let (d, m, n) = (spec.state_dim, spec.noise_dim, grid.steps);
    let dm = d * m;
    let l = &ctx.layout;
    let big = l.dim;
    let dt = grid.dt;
    let det = is_deterministic(ev.base, ev.control);
    let rows = if det { 1 } else { ev.base.paths };
    let mut c = vec![0.0; rows * (n + 1) * big];
    let mut q = vec![0.0; rows * (n + 1) * dm];
    c.par_chunks_mut((n + 1) * big).enumerate().for_each(|(r, row)| {
        let term = ctx.terminal(r);
        for (v, h) in row[n * big..].iter_mut().zip(&term.hx) {
            *v = -h;
        }
    });
    let cols = if det { big } else { big + dm };
    let mut diagnostics = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let mut targets = vec![0.0; rows * cols];
        targets.par_chunks_mut(cols).enumerate().for_each(|(r, tr)| {
            let cn = &c[(r * (n + 1) + i + 1) * big..(r * (n + 1) + i + 2) * big];
            tr[..big].copy_from_slice(cn);
            if !det {
                let dw = w.increment(r, i);
                for j in 0..d {
                    for k in 0..m {
                        tr[big + j * m + k] = cn[j] * dw[k] / dt;
                    }
                }
            }
        });
        let (fitted, diag) = fit_step(ev, det, targets, cols, cfg, i)?;
        diagnostics.push(diag);
        c.par_chunks_mut((n + 1) * big)
            .zip(q.par_chunks_mut((n + 1) * dm))
            .enumerate()
            .for_each_init(
                || (spec.new_jets(), NodeArgs::new(d)),
                |(jets, a), (r, (cr, qr))| {
                    ctx.eval(r, i, Order::First, jets, a);
                    let fr = &fitted[r * cols..(r + 1) * cols];
                    let (chat, qhat) = fr.split_at(big);
                    let out = &mut cr[i * big..(i + 1) * big];
                    out.fill(0.0);
                    l.add_shift_transpose(chat, out);
                    for j in 0..d {
                        add_row(l, &jets.b, j, &ctx.readers.b, dt * chat[j], out);
                    }
                    if !det {
                        for o in 0..dm {
                            add_row(l, &jets.sigma, o, &ctx.readers.sigma, dt * qhat[o], out);
                        }
                        qr[i * dm..(i + 1) * dm].copy_from_slice(qhat);
                    }
                    add_row(l, &jets.ell, 0, &ctx.readers.ell, -dt, out);
                },
            );
        if let Some(r) = (0..rows).find(|&r| c[(r * (n + 1) + i) * big..(r * (n + 1) + i + 1) * big].iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step: i, path: r });
        }
    }
    diagnostics.reverse();
    Ok(HilbertAdjoint {
        grid,
        layout: l.clone(),
        paths: ev.base.paths,
        noise_dim: m,
        seed: w.seed,
        control: control_id(ev.control),
        deterministic: det,
        mollification: ctx.mollification,
        diagnostics,
        c,
        q,
        rows,
    })
}

// ---------------------------------------------------------------------------------------------
// Second adjoint

/// First-order adjoint feeding the second adjoint's Hamiltonian Hessian, read in the
/// product-space sign convention.
#[derive(Clone, Copy)]
pub enum FirstAdjoint<'a> {
    Hilbert(&'a HilbertAdjoint),
    /// The anticipated adjoint `pᵃ`, entering with the opposite sign.
    Anticipated(&'a AdjointSolution),
}

impl FirstAdjoint<'_> {
    fn grid(&self) -> TimeGrid {
        match self {
            FirstAdjoint::Hilbert(a) => a.grid,
            FirstAdjoint::Anticipated(a) => a.grid,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            FirstAdjoint::Hilbert(a) => a.seed,
            FirstAdjoint::Anticipated(a) => a.seed,
        }
    }

    fn control(&self) -> &str {
        match self {
            FirstAdjoint::Hilbert(a) => &a.control,
            FirstAdjoint::Anticipated(a) => &a.control,
        }
    }

    fn read(&self, path: usize, i: usize, p: &mut [f64], q: &mut [f64]) {
        match self {
            FirstAdjoint::Hilbert(a) => {
                p.copy_from_slice(a.head(path, i + 1));
                q.copy_from_slice(a.q(path, i));
            }
            FirstAdjoint::Anticipated(a) => {
                for (x, v) in p.iter_mut().zip(a.p(path, i + 1)) {
                    *x = -v;
                }
                for (x, v) in q.iter_mut().zip(a.q(path, i)) {
                    *x = -v;
                }
            }
        }
    }
}

/// Mean and standard error of the second adjoint at every node of `[0, T]`.
#[derive(Debug, Clone, Serialize)]
pub struct HilbertSecondAdjoint {
    pub grid: TimeGrid,
    pub layout: Layout,
    pub paths: usize,
    pub deterministic: bool,
    pub mollification: Option<usize>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Largest relative symmetry drift removed by symmetrization.
    pub symmetry_drift: f64,
    pub mean: Vec<OperatorBlock>,
    pub stderr: Vec<Vec<f64>>,
}

impl HilbertSecondAdjoint {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,i,j,value,stderr")?;
        let n = self.layout.dim;
        for (k, (m, s)) in self.mean.iter().zip(&self.stderr).enumerate() {
            let t = self.grid.time(k as isize);
            for a in 0..n {
                for b in 0..n {
                    writeln!(out, "{t},{a},{b},{:e},{:e}", m.matrix[a * n + b], s[a * n + b])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `out = FᵀMF` for `F = S + G K`, with `K` given as `d` row maps.
fn transport(l: &Layout, m: &[f64], k: &[f64], out: &mut [f64], smg: &mut [f64], mk: &mut [f64]) {
    let (d, n) = (l.state_dim, l.dim);
    l.shift_gram(m, out);
    // smg = Sᵀ M G (n × d), mk = M_hh K (d × n).
    smg.fill(0.0);
    for blk in 0..l.blocks() {
        let s = shift_source(blk, l.lag, 1);
        for a in 0..d {
            for b in 0..d {
                smg[(s * d + a) * d + b] += m[(blk * d + a) * n + b];
            }
        }
    }
    for a in 0..d {
        for y in 0..n {
            mk[a * n + y] = (0..d).map(|b| m[a * n + b] * k[b * n + y]).sum();
        }
    }
    for x in 0..n {
        for y in 0..n {
            let mut s = 0.0;
            for a in 0..d {
                s += smg[x * d + a] * k[a * n + y] + k[a * n + x] * smg[y * d + a] + k[a * n + x] * mk[a * n + y];
            }
            out[x * n + y] += s;
        }
    }
}

/// `out += s · Kᵀ M_hh K`.
fn add_sandwich(l: &Layout, m: &[f64], k: &[f64], s: f64, out: &mut [f64], mk: &mut [f64]) {
    let (d, n) = (l.state_dim, l.dim);
    for a in 0..d {
        for y in 0..n {
            mk[a * n + y] = (0..d).map(|b| m[a * n + b] * k[b * n + y]).sum();
        }
    }
    for x in 0..n {
        for a in 0..d {
            let kx = k[a * n + x];
            if kx == 0.0 {
                continue;
            }
            for y in 0..n {
                out[x * n + y] += s * kx * mk[a * n + y];
            }
        }
    }
}

/// Second adjoint of a density-measure problem (`n = None`) or of its `n`-th mollification.
pub fn solve_second_adjoint_h(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    adj: FirstAdjoint,
    n: Option<usize>,
    w: &BrownianBundle,
    cfg: &RegressionConfig,
) -> Result<HilbertSecondAdjoint> {
    let ctx = HilbertContext::new(spec, base, u, n)?;
    second_adjoint_with(&ctx, adj, w, cfg)
}

struct StepScratch {
    jets: crate::model::Jets,
    args: NodeArgs,
    k: Vec<f64>,
    sig: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    out: Vec<f64>,
    smg: Vec<f64>,
    mk: Vec<f64>,
}

impl StepScratch {
    fn new(spec: &ProblemSpec, l: &Layout) -> Self {
        let (d, m, n) = (spec.state_dim, spec.noise_dim, l.dim);
        Self {
            jets: spec.new_jets(),
            args: NodeArgs::new(d),
            k: vec![0.0; d * n],
            sig: vec![0.0; d * m * n],
            p: vec![0.0; d],
            q: vec![0.0; d * m],
            out: vec![0.0; n * n],
            smg: vec![0.0; n * d],
            mk: vec![0.0; d * n],
        }
    }
}

/// Backward recursion `P(tᵢ) = E[FᵢᵀP(tᵢ₊₁)Fᵢ] + Δt ℋ_XX(tᵢ)` with `Fᵢ` the one-step map of the
/// lifted first variation and `ℋ_XX = B_XX* G*p + Σ Σ_XX* G*q − L_XX`.
pub fn second_adjoint_with(
    ctx: &HilbertContext,
    adj: FirstAdjoint,
    w: &BrownianBundle,
    cfg: &RegressionConfig,
) -> Result<HilbertSecondAdjoint> {
    let ev = &ctx.ev;
    check_bundle(ev.base, w)?;
    if adj.grid() != ev.grid || adj.seed() != w.seed || adj.control() != control_id(ev.control) {
        return Err(Error::Consistency("first adjoint was computed along a different base".into()));
    }
    let spec = ev.spec;
    let grid = ev.grid;
    let (d, m, steps) = (spec.state_dim, spec.noise_dim, grid.steps);
    let dm = d * m;
    let l = &ctx.layout;
    let n = l.dim;
    let dt = grid.dt;
    let det = is_deterministic(ev.base, ev.control);
    let rows = if det { 1 } else { ev.base.paths };
    let packed = n * (n + 1) / 2;

    let mut cur = vec![0.0; rows * n * n];
    cur.par_chunks_mut(n * n).enumerate().for_each(|(r, mr)| {
        let t = ctx.terminal(r);
        for (v, h) in mr.iter_mut().zip(&t.hxx.matrix) {
            *v = -h;
        }
    });
    let mut mean = vec![OperatorBlock::zeros(l); steps + 1];
    let mut stderr = vec![vec![0.0; n * n]; steps + 1];
    let summarize = |cur: &[f64], mean: &mut OperatorBlock, se: &mut Vec<f64>| {
        let stats: Vec<(f64, f64)> = (0..n * n)
            .into_par_iter()
            .map(|e| {
                let col: Vec<f64> = (0..rows).map(|r| cur[r * n * n + e]).collect();
                let est = mean_stderr(&col);
                (est.mean, est.stderr)
            })
            .collect();
        for (e, (mu, s)) in stats.into_iter().enumerate() {
            mean.matrix[e] = mu;
            se[e] = s;
        }
    };
    summarize(&cur, &mut mean[steps], &mut stderr[steps]);
    let mut diagnostics = Vec::with_capacity(steps);
    let mut drift_max = 0.0_f64;

    for i in (0..steps).rev() {
        let cols = if det { n * n } else { packed };
        let mut targets = vec![0.0; rows * cols];
        let drifts: Vec<f64> = targets
            .par_chunks_mut(cols)
            .enumerate()
            .map_init(
                || StepScratch::new(spec, l),
                |sc, (r, tr)| {
                    let StepScratch { jets, args, k, sig, p, q, out, smg, mk } = sc;
                    ctx.eval(r, i, Order::Second, jets, args);
                    adj.read(r, i, p, q);
                    let mr = &cur[r * n * n..(r + 1) * n * n];
                    k.fill(0.0);
                    sig.fill(0.0);
                    for j in 0..d {
                        add_row(l, &jets.b, j, &ctx.readers.b, dt, &mut k[j * n..(j + 1) * n]);
                    }
                    for o in 0..dm {
                        add_row(l, &jets.sigma, o, &ctx.readers.sigma, 1.0, &mut sig[o * n..(o + 1) * n]);
                    }
                    if det {
                        transport(l, mr, k, out, smg, mk);
                        for kk in 0..m {
                            // Rows j*m + kk of the diffusion maps form the k-th noise column.
                            let col: Vec<f64> = (0..d).flat_map(|j| sig[(j * m + kk) * n..(j * m + kk + 1) * n].to_vec()).collect();
                            add_sandwich(l, mr, &col, dt, out, mk);
                        }
                    } else {
                        let dw = w.increment(r, i);
                        for j in 0..d {
                            for kk in 0..m {
                                let row = &sig[(j * m + kk) * n..(j * m + kk + 1) * n];
                                for (x, s) in k[j * n..(j + 1) * n].iter_mut().zip(row) {
                                    *x += dw[kk] * s;
                                }
                            }
                        }
                        transport(l, mr, k, out, smg, mk);
                    }
                    for j in 0..d {
                        add_hessian(l, &jets.b, j, &ctx.readers.b, dt * p[j], out);
                    }
                    for o in 0..dm {
                        add_hessian(l, &jets.sigma, o, &ctx.readers.sigma, dt * q[o], out);
                    }
                    add_hessian(l, &jets.ell, 0, &ctx.readers.ell, -dt, out);
                    let mut worst = 0.0_f64;
                    for a in 0..n {
                        for b in 0..a {
                            worst = worst.max((out[a * n + b] - out[b * n + a]).abs());
                        }
                    }
                    let drift = worst / scale_of(out);
                    if det {
                        tr.copy_from_slice(out);
                        symmetrize(tr, n);
                    } else {
                        let mut e = 0;
                        for a in 0..n {
                            for b in a..n {
                                tr[e] = 0.5 * (out[a * n + b] + out[b * n + a]);
                                e += 1;
                            }
                        }
                    }
                    drift
                },
            )
            .collect();
        let drift = drifts.iter().fold(0.0_f64, |a, &b| a.max(if b.is_nan() { f64::INFINITY } else { b }));
        if drift > SYMMETRY_DRIFT_TOL {
            return Err(Error::NumericalHealth(format!(
                "second adjoint symmetry drift {drift:.3e} at step {i}"
            )));
        }
        drift_max = drift_max.max(drift);
        let (fitted, diag) = fit_step(ev, det, targets, cols, cfg, i)?;
        diagnostics.push(diag);
        if det {
            cur.copy_from_slice(&fitted);
        } else {
            cur.par_chunks_mut(n * n).enumerate().for_each(|(r, mr)| {
                let fr = &fitted[r * packed..(r + 1) * packed];
                let mut e = 0;
                for a in 0..n {
                    for b in a..n {
                        mr[a * n + b] = fr[e];
                        mr[b * n + a] = fr[e];
                        e += 1;
                    }
                }
            });
        }
        if let Some(r) = (0..rows).find(|&r| cur[r * n * n..(r + 1) * n * n].iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence { step: i, path: r });
        }
        summarize(&cur, &mut mean[i], &mut stderr[i]);
    }
    diagnostics.reverse();
    Ok(HilbertSecondAdjoint {
        grid,
        layout: l.clone(),
        paths: ev.base.paths,
        deterministic: det,
        mollification: ctx.mollification,
        diagnostics,
        symmetry_drift: drift_max,
        mean,
        stderr,
    })
}

/// Top-left block of the second adjoint at every node.
pub fn extract_p00(p: &HilbertSecondAdjoint) -> SecondOrderKernel {
    let d = p.layout.state_dim;
    let n = p.layout.dim;
    SecondOrderKernel {
        dim: d,
        times: (0..=p.grid.steps).map(|i| p.grid.time(i as isize)).collect(),
        matrices: p.mean.iter().map(|b| b.head_block()).collect(),
        std_errors: p
            .stderr
            .iter()
            .map(|s| (0..d * d).map(|k| s[(k / d) * n + k % d]).collect())
            .collect(),
        method: match p.mollification {
            Some(k) => KernelMethod::Mollified(k),
            None => KernelMethod::MatrixBsde,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::absde::solve_absde;
    use crate::model::{scenario_lq_delay, LqDelayParams, MeasureChoice};
    use crate::paths::{make_grid, sample_brownian};
    use crate::sdde::simulate_state;
    use std::sync::Arc;

    fn wiggle(seed: usize, n: usize) -> Vec<f64> {
        (0..n).map(|k| ((k * 7919 + seed * 104729) as f64 * 0.618).sin()).collect()
    }

    fn density_params() -> LqDelayParams {
        LqDelayParams {
            b_u: 0.0,
            mu_b: MeasureChoice::Uniform,
            mu_sigma: MeasureChoice::Uniform,
            delay: 0.25,
            ..Default::default()
        }
    }

    fn run(spec: &ProblemSpec, n: usize, paths: usize) -> (TrajectoryBundle, ControlPath, BrownianBundle) {
        let g = make_grid(spec.horizon, n, spec.delay).unwrap();
        let w = sample_brownian(g, paths, spec.noise_dim, 3).unwrap();
        let u = ControlPath::constant(n, 0);
        let x = simulate_state(spec, &u, &w).unwrap();
        (x, u, w)
    }

    fn zero_dynamics(mut spec: ProblemSpec) -> ProblemSpec {
        let zero = |_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, _j: &mut Jet| {};
        spec.drift = Arc::new(zero);
        spec.diffusion = Arc::new(zero);
        spec.running_cost = Arc::new(zero);
        spec
    }

    #[test]
    fn shift_fills_the_recent_past_with_the_head() {
        let g = make_grid(1.0, 10, 1.0).unwrap();
        let p = HilbertPoint::from_fn(vec![2.0], g, |th| vec![th]);
        let s = shift_semigroup(0.5, &p).unwrap();
        assert_eq!(s.head, vec![2.0]);
        for j in 0..=10 {
            let th = g.time(j as isize - 10);
            let v = s.tail_node(j)[0];
            if th >= -0.5 - 1e-12 {
                assert_eq!(v, 2.0);
            } else {
                assert!((v - (th + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_is_a_semigroup_bitwise() {
        let g = make_grid(1.0, 10, 1.0).unwrap();
        let p = HilbertPoint::new(vec![0.3, -1.0], wiggle(1, 22), g).unwrap();
        assert_eq!(shift_semigroup(0.0, &p).unwrap(), p);
        let two = shift_semigroup(0.2, &shift_semigroup(0.3, &p).unwrap()).unwrap();
        assert_eq!(two, shift_semigroup(0.5, &p).unwrap());
        assert!(matches!(shift_semigroup(0.25, &p), Err(Error::Alignment(_))));
    }

    #[test]
    fn shift_adjoint_is_the_weighted_transpose() {
        let g = make_grid(1.0, 16, 0.5).unwrap();
        for (s, t) in [(1, 0.0), (2, 0.125), (3, 0.375), (4, 0.5), (5, 0.75)] {
            let h = HilbertPoint::new(wiggle(s, 2), wiggle(s + 10, 18), g).unwrap();
            let k = HilbertPoint::new(wiggle(s + 20, 2), wiggle(s + 30, 18), g).unwrap();
            let lhs = shift_semigroup(t, &h).unwrap().inner(&k);
            let rhs = h.inner(&shift_adjoint(t, &k).unwrap());
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
        }
    }

    #[test]
    fn lift_of_a_constant_path_is_constant() {
        let spec = zero_dynamics(scenario_lq_delay(&LqDelayParams { x0: 1.5, ..density_params() }).unwrap());
        let (x, _, _) = run(&spec, 16, 2);
        for t in [0.0, 0.5, 1.0] {
            let p = lift(&x, 1, t).unwrap();
            assert_eq!(p.head, vec![1.5]);
            assert!(p.tail.iter().all(|&v| v == 1.5));
        }
        assert!(matches!(lift(&x, 0, 0.03), Err(Error::Alignment(_))));
    }

    #[test]
    fn inner_product_uses_the_trapezoid_rule() {
        let g = make_grid(1.0, 8, 1.0).unwrap();
        let p = HilbertPoint::from_fn(vec![2.0], g, |th| vec![th]);
        // 4 + ∫_{-1}^0 θ² dθ on 8 trapezoid panels.
        let exact = 4.0 + 1.0 / 3.0 + 1.0 / (6.0 * 64.0);
        assert!((p.inner(&p) - exact).abs() < 1e-12);
    }

    #[test]
    fn operators_without_delay_only_touch_the_head() {
        let p = LqDelayParams { a0: 0.4, kappa_b: 0.3, mu_b: MeasureChoice::None, mu_sigma: MeasureChoice::None, ..density_params() };
        let spec = scenario_lq_delay(&p).unwrap();
        let (x, u, _) = run(&spec, 16, 2);
        let ops = assemble_operators(&spec, &x, &u, 0, 0.25).unwrap();
        let x4 = x.at(0, 4)[0];
        let bx = 0.4 + 0.3 * x4.cos();
        assert!((ops.bx[0] - bx).abs() < 1e-15);
        assert!(ops.bx[1..].iter().all(|&v| v == 0.0));
        let g = x.grid;
        let h = HilbertPoint::new(vec![1.7], vec![0.0; g.lag + 1], g).unwrap();
        assert!((ops.apply_bx(&h)[0] - 1.7 * bx).abs() < 1e-14);
        let hb = ops.bxx[0].head_block()[0];
        assert!((hb + 0.3 * x4.sin()).abs() < 1e-15);
    }

    #[test]
    fn density_operators_read_the_tail_and_hessians_are_symmetric() {
        let mut spec = scenario_lq_delay(&LqDelayParams { a1: 0.7, ..density_params() }).unwrap();
        spec.drift = Arc::new(|_t: f64, x: &[f64], y: &[f64], _u: &[f64], o: Order, j: &mut Jet| {
            j.value[0] = x[0] * y[0] + 0.5 * y[0] * y[0];
            if o >= Order::First {
                j.dx[0] = y[0];
                j.dy[0] = x[0] + y[0];
            }
            if o >= Order::Second {
                j.dxy[0] = 1.0;
                j.dyy[0] = 1.0;
            }
        });
        let (x, u, _) = run(&spec, 16, 2);
        let ops = assemble_operators(&spec, &x, &u, 0, 0.5).unwrap();
        let g = x.grid;
        // B_X h for h = (1, tail ≡ 1) is b_x + b_y because the measure has unit mass.
        let one = HilbertPoint::new(vec![1.0], vec![1.0; g.lag + 1], g).unwrap();
        let mut args = NodeArgs::new(1);
        let ev = BaseEval::new(&spec, &x, &u).unwrap();
        ev.args(0, 8, &mut args);
        let expect = args.yb[0] + args.x[0] + args.yb[0];
        assert!((ops.apply_bx(&one)[0] - expect).abs() < 1e-12);
        for s in 0..4 {
            let h = HilbertPoint::new(wiggle(s, 1), wiggle(s + 5, g.lag + 1), g).unwrap();
            let k = HilbertPoint::new(wiggle(s + 9, 1), wiggle(s + 11, g.lag + 1), g).unwrap();
            let b = &ops.bxx[0];
            assert!((b.bilinear(&h, &k) - b.bilinear(&k, &h)).abs() < 1e-12);
        }
        assert_eq!(ops.bxx[0].symmetry_defect(), 0.0);
    }

    #[test]
    fn atoms_require_mollification() {
        let spec = scenario_lq_delay(&LqDelayParams { b_u: 0.0, ..Default::default() }).unwrap();
        let (x, u, w) = run(&spec, 16, 2);
        assert!(matches!(HilbertContext::new(&spec, &x, &u, None), Err(Error::Pipeline(_))));
        let r = solve_first_adjoint_h(&spec, &x, &u, &w, &RegressionConfig::default());
        assert!(matches!(r, Err(Error::Pipeline(_))));
        assert!(HilbertContext::new(&spec, &x, &u, Some(8)).is_ok());
    }

    fn past_terminal(mut spec: ProblemSpec, quadratic: bool) -> ProblemSpec {
        spec.mu_h = crate::measures::DelayMeasure::uniform(spec.delay).unwrap();
        spec.terminal_cost = Arc::new(move |_t: f64, x: &[f64], y: &[f64], _u: &[f64], o: Order, j: &mut Jet| {
            if quadratic {
                j.value[0] = x[0] * x[0] + y[0] * y[0];
                if o >= Order::First {
                    j.dx[0] = 2.0 * x[0];
                    j.dy[0] = 2.0 * y[0];
                }
                if o >= Order::Second {
                    j.dxx[0] = 2.0;
                    j.dyy[0] = 2.0;
                }
            } else {
                j.value[0] = x[0] + 2.0 * y[0];
                if o >= Order::First {
                    j.dx[0] = 1.0;
                    j.dy[0] = 2.0;
                }
            }
        });
        spec
    }

    #[test]
    fn first_adjoint_without_dynamics_is_pure_transport() {
        let spec = past_terminal(zero_dynamics(scenario_lq_delay(&density_params()).unwrap()), false);
        let (x, u, w) = run(&spec, 16, 3);
        let adj = solve_first_adjoint_h(&spec, &x, &u, &w, &RegressionConfig::default()).unwrap();
        assert!(adj.deterministic);
        let g = x.grid;
        let ctx = HilbertContext::new(&spec, &x, &u, None).unwrap();
        let mut hx = ctx.terminal(0).hx;
        ctx.layout.unweight(&mut hx);
        hx.iter_mut().for_each(|v| *v = -*v);
        let terminal = HilbertPoint::from_vec(&hx, 1, g).unwrap();
        for i in 0..=16 {
            let expect = shift_adjoint(g.time(16 - i as isize), &terminal).unwrap();
            let got = adj.p(1, i);
            for (a, b) in got.to_vec().iter().zip(expect.to_vec()) {
                assert!((a - b).abs() < 1e-12, "node {i}: {a} vs {b}");
            }
            assert_eq!(adj.q(1, i), &[0.0]);
        }
    }

    #[test]
    fn first_adjoint_head_matches_the_anticipated_adjoint_and_ode() {
        let p = LqDelayParams { a0: 0.6, a1: -0.4, ..density_params() };
        let spec = scenario_lq_delay(&p).unwrap();
        let (x, u, w) = run(&spec, 64, 2);
        let cfg = RegressionConfig::default();
        let h = solve_first_adjoint_h(&spec, &x, &u, &w, &cfg).unwrap();
        let a = solve_absde(&spec, &x, &u, &w, &cfg).unwrap();
        for i in 0..=64 {
            let (ph, pa) = (h.head(0, i)[0], a.p(0, i)[0]);
            assert!((ph + pa).abs() < 1e-10 * pa.abs().max(1.0), "node {i}: {ph} vs {pa}");
        }
        // Without delay the head solves -ṗ = a₀p + 2x, p(T) = 2x(T), x = e^{a₀t}.
        let q = LqDelayParams { a0: 0.6, mu_b: MeasureChoice::None, mu_sigma: MeasureChoice::None, ..density_params() };
        let spec = scenario_lq_delay(&q).unwrap();
        let n = 512;
        let (x, u, w) = run(&spec, n, 1);
        let h = solve_first_adjoint_h(&spec, &x, &u, &w, &cfg).unwrap();
        let a0: f64 = 0.6;
        let exact = |t: f64| {
            // p(t) = e^{a₀(T-t)}[2e^{a₀T} + ∫_t^T 2e^{a₀s}e^{-a₀(T-s)}... ] solved in closed form.
            let tt = 1.0;
            2.0 * (a0 * (2.0 * tt - t)).exp() + ((a0 * (2.0 * tt - t)).exp() - (a0 * t).exp()) / a0
        };
        for i in [0, n / 2, n] {
            let t = x.grid.time(i as isize);
            let got = -h.head(0, i)[0];
            assert!((got - exact(t)).abs() < 5.0 / n as f64 * exact(t), "t={t}: {got} vs {}", exact(t));
        }
    }

    #[test]
    fn second_adjoint_without_dynamics_is_double_transport() {
        let spec = past_terminal(zero_dynamics(scenario_lq_delay(&density_params()).unwrap()), true);
        let (x, u, w) = run(&spec, 16, 2);
        let cfg = RegressionConfig::default();
        let adj = solve_first_adjoint_h(&spec, &x, &u, &w, &cfg).unwrap();
        let p = solve_second_adjoint_h(&spec, &x, &u, FirstAdjoint::Hilbert(&adj), None, &w, &cfg).unwrap();
        let g = x.grid;
        let terminal = &p.mean[16];
        for i in [0, 5, 12, 16] {
            let t = g.time(16 - i as isize);
            for s in 0..3 {
                let h = HilbertPoint::new(wiggle(s, 1), wiggle(s + 3, g.lag + 1), g).unwrap();
                let k = HilbertPoint::new(wiggle(s + 6, 1), wiggle(s + 7, g.lag + 1), g).unwrap();
                let expect = terminal.bilinear(&shift_semigroup(t, &h).unwrap(), &shift_semigroup(t, &k).unwrap());
                let got = p.mean[i].bilinear(&h, &k);
                assert!((got - expect).abs() < 1e-12, "node {i}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn second_adjoint_head_without_delay_solves_the_linear_ode() {
        let (a0, s0) = (0.3, 0.5);
        let q = LqDelayParams {
            a0,
            s0,
            x0: 0.0,
            mu_b: MeasureChoice::None,
            mu_sigma: MeasureChoice::None,
            ..density_params()
        };
        let spec = scenario_lq_delay(&q).unwrap();
        let n = 512;
        let (x, u, w) = run(&spec, n, 2);
        let cfg = RegressionConfig::default();
        let adj = solve_first_adjoint_h(&spec, &x, &u, &w, &cfg).unwrap();
        let p = solve_second_adjoint_h(&spec, &x, &u, FirstAdjoint::Hilbert(&adj), None, &w, &cfg).unwrap();
        assert!(p.deterministic);
        let k = 2.0 * a0 + s0 * s0;
        // Ṁ = -kM + 2 with M(T) = -2: the head block of the second adjoint.
        let exact = |t: f64| 2.0 / k + (-2.0 - 2.0 / k) * (k * (1.0 - t)).exp();
        let kern = extract_p00(&p);
        assert_eq!(kern.matrices[n][0], -2.0);
        for i in [0, n / 4, n / 2] {
            let t = kern.times[i];
            let got = kern.matrices[i][0];
            assert!((got - exact(t)).abs() < 4.0 / n as f64 * exact(t).abs(), "t={t}: {got} vs {}", exact(t));
        }
    }

    #[test]
    fn stochastic_pipelines_agree_on_the_head() {
        let p = LqDelayParams { a0: 0.3, a1: -0.5, s0: 0.4, s1: 0.3, ..density_params() };
        let spec = scenario_lq_delay(&p).unwrap();
        let (x, u, w) = run(&spec, 32, 4000);
        let cfg = RegressionConfig::default();
        let h = solve_first_adjoint_h(&spec, &x, &u, &w, &cfg).unwrap();
        let a = solve_absde(&spec, &x, &u, &w, &cfg).unwrap();
        assert!(!h.deterministic);
        for i in [0, 16, 31] {
            let (ph, pa) = (h.mean_head(i)[0], a.mean_p(i)[0]);
            assert!((ph + pa).abs() < 1e-3 * pa.abs(), "node {i}: {ph} vs {pa}");
        }
        let s = solve_second_adjoint_h(&spec, &x, &u, FirstAdjoint::Hilbert(&h), None, &w, &cfg).unwrap();
        let t = solve_second_adjoint_h(&spec, &x, &u, FirstAdjoint::Anticipated(&a), None, &w, &cfg).unwrap();
        assert!(s.symmetry_drift <= SYMMETRY_DRIFT_TOL);
        let (ks, kt) = (extract_p00(&s), extract_p00(&t));
        assert_eq!(ks.matrices[32], vec![-2.0]);
        assert!((ks.matrices[0][0] - kt.matrices[0][0]).abs() < 1e-3 * kt.matrices[0][0].abs());
        assert!(ks.std_errors[16][0] > 0.0);
    }
}
