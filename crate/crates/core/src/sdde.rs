//! Forward solvers: the controlled state, spiked controls, the first and second variations,
//! their mollified counterparts, and linearized flows started at an intermediate time.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{NodeWeights, PrefixSum};
use crate::model::{ControlPath, Jet, Jets, MeasureWeights, Order, ProblemSpec};
use crate::paths::{BrownianBundle, TimeGrid};
use crate::stats::{mean_stderr, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    State,
    Spiked,
    FirstVariation,
    SecondVariation,
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: String,
    pub control: String,
    pub seed: u64,
    /// Mollification index, `None` for exact measures.
    pub mollification: Option<usize>,
}

/// `M` paths of a `dim`-vector process on the nodes `-L..=N`, stored path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub label: Label,
    pub provenance: Provenance,
    pub grid: TimeGrid,
    pub paths: usize,
    pub dim: usize,
    values: Vec<f64>,
}

impl TrajectoryBundle {
    pub fn zeros(label: Label, provenance: Provenance, grid: TimeGrid, paths: usize, dim: usize) -> Self {
        Self {
            label,
            provenance,
            grid,
            paths,
            dim,
            values: vec![0.0; paths * grid.history_nodes() * dim],
        }
    }

    #[inline]
    pub fn nodes(&self) -> usize {
        self.grid.history_nodes()
    }

    /// Full series of one path, nodes `-L..=N`.
    #[inline]
    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.nodes() * self.dim;
        &self.values[p * n..(p + 1) * n]
    }

    /// Value at grid node `i` (negative indices address the history).
    #[inline]
    pub fn at(&self, p: usize, i: isize) -> &[f64] {
        let k = (i + self.grid.lag as isize) as usize;
        let base = (p * self.nodes() + k) * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn terminal(&self, p: usize) -> &[f64] {
        self.at(p, self.grid.steps as isize)
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Per-path `sup_t |x(t)|²` over all stored nodes.
    pub fn sup_sq(&self) -> Vec<f64> {
        self.sup_sq_combination(&[])
    }

    /// Per-path `sup_t |self(t) - Σ others(t)|²`.
    pub fn sup_sq_combination(&self, minus: &[&TrajectoryBundle]) -> Vec<f64> {
        let n = self.nodes() * self.dim;
        (0..self.paths)
            .map(|p| {
                let a = &self.values[p * n..(p + 1) * n];
                let mut best = 0.0_f64;
                for (k, chunk) in a.chunks(self.dim).enumerate() {
                    let mut s = 0.0;
                    for c in 0..self.dim {
                        let mut v = chunk[c];
                        for o in minus {
                            v -= o.values[p * n + k * self.dim + c];
                        }
                        s += v * v;
                    }
                    best = best.max(s);
                }
                best
            })
            .collect()
    }

    /// `E sup |x|²` with its standard error.
    pub fn sup_second_moment(&self) -> Estimate {
        mean_stderr(&self.sup_sq())
    }

    pub fn write_csv(&self, path: &Path, header: &[(&str, String)]) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out, header)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_to(&self, out: &mut impl Write, header: &[(&str, String)]) -> Result<()> {
        writeln!(
            out,
            "# label={:?} spec={} control={} seed={} mollification={} T={} N={} dt={} d={} L={} paths={}",
            self.label,
            self.provenance.spec,
            self.provenance.control,
            self.provenance.seed,
            self.provenance.mollification.map_or("exact".to_string(), |n| n.to_string()),
            self.grid.horizon,
            self.grid.steps,
            self.grid.dt,
            self.grid.delay,
            self.grid.lag,
            self.paths
        )?;
        for (k, v) in header {
            writeln!(out, "# {k}={v}")?;
        }
        writeln!(out, "path,t,component,value")?;
        let lag = self.grid.lag as isize;
        for p in 0..self.paths {
            for i in -lag..=self.grid.steps as isize {
                let t = self.grid.time(i);
                for (c, v) in self.at(p, i).iter().enumerate() {
                    writeln!(out, "{p},{t},{c},{v:e}")?;
                }
            }
        }
        Ok(())
    }

    /// Binary dump: magic `SDDETRJ\0`, `u32` version, `u64` paths, nodes, dim, lag, steps,
    /// `f64` horizon, delay, t0, dt, a `u32`-length-prefixed JSON metadata block, then the
    /// values as little-endian `f64`, path-major, node-major, component-minor.
    pub fn write_binary(&self, path: &Path, metadata: &serde_json::Value) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary_to(&mut out, metadata)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_binary_to(&self, out: &mut impl Write, metadata: &serde_json::Value) -> Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        for v in [self.paths, self.nodes(), self.dim, self.grid.lag, self.grid.steps] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        let t0 = self.grid.time(-(self.grid.lag as isize));
        for v in [self.grid.horizon, self.grid.delay, t0, self.grid.dt] {
            out.write_all(&v.to_le_bytes())?;
        }
        let meta = serde_json::json!({
            "label": self.label,
            "provenance": self.provenance,
            "extra": metadata,
        });
        let meta = serde_json::to_vec(&meta)?;
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        out.write_all(&meta)?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary_from(&mut f)
    }

    pub fn read_binary_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Shape("not a trajectory dump".into()));
        }
        let version = read_u32(r)?;
        if version != BINARY_VERSION {
            return Err(Error::Shape(format!("unsupported dump version {version}")));
        }
        let paths = read_u64(r)? as usize;
        let nodes = read_u64(r)? as usize;
        let dim = read_u64(r)? as usize;
        let lag = read_u64(r)? as usize;
        let steps = read_u64(r)? as usize;
        let horizon = read_f64(r)?;
        let delay = read_f64(r)?;
        let _t0 = read_f64(r)?;
        let dt = read_f64(r)?;
        if nodes != steps + lag + 1 {
            return Err(Error::Shape("node count does not match steps and lag".into()));
        }
        let len = read_u32(r)? as usize;
        let mut meta = vec![0u8; len];
        r.read_exact(&mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let label: Label = serde_json::from_value(meta["label"].clone())?;
        let provenance: Provenance = serde_json::from_value(meta["provenance"].clone())?;
        let mut values = vec![0.0; paths * nodes * dim];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(Self {
            label,
            provenance,
            grid: TimeGrid { horizon, steps, dt, delay, lag },
            paths,
            dim,
            values,
        })
    }
}

const BINARY_MAGIC: &[u8; 8] = b"SDDETRJ\0";
const BINARY_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(read_u64(r)?))
}

/// Stable short identifier of a control path.
pub fn control_id(u: &ControlPath) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &i in &u.index {
        h ^= i as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------------------------
// Spikes

/// Replacement of the control by `value` (an index into the control set) on `[start, start+width)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeWindow {
    pub start: f64,
    pub width: f64,
    pub value: usize,
}

impl SpikeWindow {
    /// Grid steps `[i₀, i₁)` covered by the window.
    pub fn steps(&self, grid: &TimeGrid) -> Result<std::ops::Range<usize>> {
        if !(self.width >= 0.0) || self.start < -1e-12 || self.start + self.width > grid.horizon * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "spike window [{}, {}) is outside [0, {}]",
                self.start,
                self.start + self.width,
                grid.horizon
            )));
        }
        let i0 = grid.index_of(self.start)?;
        let k = grid.steps_in(self.width)?;
        if i0 + k > grid.steps {
            return Err(Error::Domain("spike window extends past the horizon".into()));
        }
        Ok(i0..i0 + k)
    }
}

/// The spiked control `u^ε`: `v` on the window, `u` elsewhere.
pub fn spike(u: &ControlPath, w: &SpikeWindow, grid: &TimeGrid) -> Result<ControlPath> {
    spike_many(u, std::slice::from_ref(w), grid)
}

/// Spike on a union of windows; later windows win where they overlap.
pub fn spike_many(u: &ControlPath, ws: &[SpikeWindow], grid: &TimeGrid) -> Result<ControlPath> {
    if u.steps != grid.steps {
        return Err(Error::Shape(format!("control has {} steps, grid has {}", u.steps, grid.steps)));
    }
    let mut out = u.clone();
    let reps = u.paths.unwrap_or(1);
    for w in ws {
        let r = w.steps(grid)?;
        for p in 0..reps {
            for i in r.clone() {
                out.index[p * u.steps + i] = w.value as u32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------------------------
// Coefficients frozen along a base trajectory

/// Arguments of the coefficients at one node: the state and its past integrals.
#[derive(Debug, Clone)]
pub struct NodeArgs {
    pub x: Vec<f64>,
    pub yb: Vec<f64>,
    pub ys: Vec<f64>,
    pub yl: Vec<f64>,
    pub yh: Vec<f64>,
}

impl NodeArgs {
    pub fn new(d: usize) -> Self {
        Self {
            x: vec![0.0; d],
            yb: vec![0.0; d],
            ys: vec![0.0; d],
            yl: vec![0.0; d],
            yh: vec![0.0; d],
        }
    }
}

/// Coefficient evaluation along a simulated base pair `(x, u)`, with the past integrals of
/// the base cached for every node of `[0, T]`.
pub struct BaseEval<'a> {
    pub spec: &'a ProblemSpec,
    pub grid: TimeGrid,
    pub weights: MeasureWeights,
    pub base: &'a TrajectoryBundle,
    pub control: &'a ControlPath,
    cache: [Option<Vec<f64>>; 4],
}

impl<'a> BaseEval<'a> {
    pub fn new(spec: &'a ProblemSpec, base: &'a TrajectoryBundle, control: &'a ControlPath) -> Result<Self> {
        let grid = base.grid;
        let weights = spec.weights(&grid)?;
        control.validate(spec, &grid)?;
        if base.dim != spec.state_dim {
            return Err(Error::Shape("base trajectory dimension differs from the state".into()));
        }
        let d = spec.state_dim;
        let n1 = grid.steps + 1;
        let lag = grid.lag;
        let ws = [&weights.b, &weights.sigma, &weights.ell, &weights.h];
        let cache = ws.map(|w| {
            (!w.is_zero()).then(|| {
                let mut out = vec![0.0; base.paths * n1 * d];
                out.par_chunks_mut(n1 * d).enumerate().for_each_init(
                    || PrefixSum::new(base.nodes(), d),
                    |prefix, (p, row)| {
                        prefix.reset();
                        let series = base.path(p);
                        for i in 0..n1 {
                            prefix.extend(series, i + lag);
                            w.apply_prefix(series, prefix, d, i + lag, &mut row[i * d..(i + 1) * d]);
                        }
                    },
                );
                out
            })
        });
        Ok(Self { spec, grid, weights, base, control, cache })
    }

    /// Fills the state and past integrals at node `i` of path `p`.
    #[inline]
    pub fn args(&self, p: usize, i: usize, a: &mut NodeArgs) {
        let d = self.spec.state_dim;
        let end = i + self.grid.lag;
        a.x.copy_from_slice(&self.base.path(p)[end * d..(end + 1) * d]);
        let off = (p * (self.grid.steps + 1) + i) * d;
        for (c, out) in self.cache.iter().zip([&mut a.yb, &mut a.ys, &mut a.yl, &mut a.yh]) {
            match c {
                Some(v) => out.copy_from_slice(&v[off..off + d]),
                None => out.fill(0.0),
            }
        }
    }

    /// Evaluates `b`, `σ`, `ℓ` at node `i` with control index `k`.
    #[inline]
    pub fn coefficients(&self, i: usize, k: usize, a: &NodeArgs, order: Order, jets: &mut Jets) {
        let t = self.grid.time(i as isize);
        let u = &self.spec.control_set[k];
        jets.b.reset(order);
        self.spec.drift.eval(t, &a.x, &a.yb, u, order, &mut jets.b);
        jets.sigma.reset(order);
        self.spec.diffusion.eval(t, &a.x, &a.ys, u, order, &mut jets.sigma);
        jets.ell.reset(order);
        self.spec.running_cost.eval(t, &a.x, &a.yl, u, order, &mut jets.ell);
    }

    #[inline]
    pub fn terminal(&self, a: &NodeArgs, order: Order, jets: &mut Jets) {
        jets.h.reset(order);
        self.spec
            .terminal_cost
            .eval(self.grid.horizon, &a.x, &a.yh, &[], order, &mut jets.h);
    }
}

/// `out[o] += Σ_a ∂x ψ_o[a] v[a] + ∂y ψ_o[a] w[a]` for outputs `o = first + stride·j`.
#[inline]
pub(crate) fn add_linear(jet: &Jet, v: &[f64], w: &[f64], o: usize) -> f64 {
    let d = jet.dim;
    let mut s = 0.0;
    for a in 0..d {
        s += jet.dx[o * d + a] * v[a] + jet.dy[o * d + a] * w[a];
    }
    s
}

/// `vᵀψ_xx v + 2vᵀψ_xy w + wᵀψ_yy w` for output `o`.
#[inline]
pub(crate) fn quad(jet: &Jet, v: &[f64], w: &[f64], o: usize) -> f64 {
    let d = jet.dim;
    let mut s = 0.0;
    for a in 0..d {
        for b in 0..d {
            let k = (o * d + a) * d + b;
            s += jet.dxx[k] * v[a] * v[b] + 2.0 * jet.dxy[k] * v[a] * w[b] + jet.dyy[k] * w[a] * w[b];
        }
    }
    s
}

/// Past-integral weights used for the variation processes themselves.
#[derive(Debug, Clone)]
pub struct FlowWeights {
    pub b: NodeWeights,
    pub sigma: NodeWeights,
    pub mollification: Option<usize>,
}

impl FlowWeights {
    pub fn exact(spec: &ProblemSpec, grid: &TimeGrid) -> Result<Self> {
        let w = spec.weights(grid)?;
        Ok(Self { b: w.b, sigma: w.sigma, mollification: None })
    }

    pub fn mollified(spec: &ProblemSpec, grid: &TimeGrid, n: usize) -> Result<Self> {
        let m = spec.mollified(n)?;
        let w = m.weights(grid)?;
        Ok(Self { b: w.b, sigma: w.sigma, mollification: Some(n) })
    }
}

fn check_inputs(spec: &ProblemSpec, u: &ControlPath, w: &BrownianBundle) -> Result<()> {
    spec.check_grid(&w.grid)?;
    u.validate(spec, &w.grid)?;
    if w.noise_dim != spec.noise_dim {
        return Err(Error::Shape(format!(
            "bundle has {} noise components, problem has {}",
            w.noise_dim, spec.noise_dim
        )));
    }
    if let Some(m) = u.paths {
        if m != w.paths {
            return Err(Error::Shape(format!("control has {m} paths, bundle has {}", w.paths)));
        }
    }
    Ok(())
}

fn first_divergence(failures: Vec<Option<usize>>) -> Result<()> {
    if let Some((path, step)) = failures
        .into_iter()
        .enumerate()
        .find_map(|(p, f)| f.map(|s| (p, s)))
    {
        return Err(Error::Divergence { step, path });
    }
    Ok(())
}

// ---------------------------------------------------------------------------------------------
// State

/// Euler–Maruyama for the controlled delay equation, history taken from the problem.
pub fn simulate_state(spec: &ProblemSpec, u: &ControlPath, w: &BrownianBundle) -> Result<TrajectoryBundle> {
    simulate_labelled(spec, u, w, Label::State)
}

/// State under the spiked control, on the same bundle.
pub fn simulate_spiked(
    spec: &ProblemSpec,
    u: &ControlPath,
    win: &SpikeWindow,
    w: &BrownianBundle,
) -> Result<TrajectoryBundle> {
    let ue = spike(u, win, &w.grid)?;
    simulate_labelled(spec, &ue, w, Label::Spiked)
}

fn simulate_labelled(spec: &ProblemSpec, u: &ControlPath, w: &BrownianBundle, label: Label) -> Result<TrajectoryBundle> {
    check_inputs(spec, u, w)?;
    let grid = w.grid;
    let weights = spec.weights(&grid)?;
    let d = spec.state_dim;
    let m = spec.noise_dim;
    let lag = grid.lag;
    let mut history = Vec::with_capacity((lag + 1) * d);
    for j in 0..=lag {
        let h = spec.history.at(grid.time(j as isize - lag as isize));
        if h.len() != d || h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("history must be a finite state-dimension vector".into()));
        }
        history.extend(h);
    }
    let mut out = TrajectoryBundle::zeros(
        label,
        Provenance {
            spec: spec.name.clone(),
            control: control_id(u),
            seed: w.seed,
            mollification: None,
        },
        grid,
        w.paths,
        d,
    );
    let stride = grid.history_nodes() * d;
    let failures: Vec<Option<usize>> = out
        .values
        .par_chunks_mut(stride)
        .enumerate()
        .map_init(
            || (spec.new_jets(), NodeArgs::new(d), PrefixSum::new(grid.history_nodes(), d)),
            |(jets, a, prefix), (p, series)| {
                series[..history.len()].copy_from_slice(&history);
                prefix.reset();
                for i in 0..grid.steps {
                    let end = i + lag;
                    prefix.extend(series, end);
                    a.x.copy_from_slice(&series[end * d..(end + 1) * d]);
                    weights.b.apply_prefix(series, prefix, d, end, &mut a.yb);
                    weights.sigma.apply_prefix(series, prefix, d, end, &mut a.ys);
                    let t = grid.time(i as isize);
                    let uv = &spec.control_set[u.at(p, i)];
                    jets.b.reset(Order::Value);
                    spec.drift.eval(t, &a.x, &a.yb, uv, Order::Value, &mut jets.b);
                    jets.sigma.reset(Order::Value);
                    spec.diffusion.eval(t, &a.x, &a.ys, uv, Order::Value, &mut jets.sigma);
                    let dw = w.increment(p, i);
                    let mut ok = true;
                    for j in 0..d {
                        let mut v = a.x[j] + jets.b.value[j] * grid.dt;
                        for k in 0..m {
                            v += jets.sigma.value[j * m + k] * dw[k];
                        }
                        ok &= v.is_finite();
                        series[(end + 1) * d + j] = v;
                    }
                    if !ok {
                        return Some(i + 1);
                    }
                }
                None
            },
        )
        .collect();
    first_divergence(failures)?;
    Ok(out)
}

// ---------------------------------------------------------------------------------------------
// Variations

fn variation_provenance(base: &TrajectoryBundle, u: &ControlPath, n: Option<usize>) -> Provenance {
    Provenance {
        spec: base.provenance.spec.clone(),
        control: control_id(u),
        seed: base.provenance.seed,
        mollification: n,
    }
}

fn check_base(spec: &ProblemSpec, base: &TrajectoryBundle, w: &BrownianBundle) -> Result<()> {
    if base.grid != w.grid || base.paths != w.paths {
        return Err(Error::Shape("base trajectory and Brownian bundle differ in grid or paths".into()));
    }
    if base.provenance.seed != w.seed {
        return Err(Error::Consistency("base trajectory was simulated on a different bundle".into()));
    }
    if base.dim != spec.state_dim {
        return Err(Error::Shape("base trajectory dimension differs from the state".into()));
    }
    Ok(())
}

/// First variation `y^ε` driven by `δσ 1_E` along the base pair.
pub fn simulate_first_variation(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    win: &SpikeWindow,
    w: &BrownianBundle,
) -> Result<TrajectoryBundle> {
    let fw = FlowWeights::exact(spec, &base.grid)?;
    first_variation_with(spec, base, u, win, w, &fw)
}

/// Second variation `z^ε`, given the first variation on the same bundle.
pub fn simulate_second_variation(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    y: &TrajectoryBundle,
    u: &ControlPath,
    win: &SpikeWindow,
    w: &BrownianBundle,
) -> Result<TrajectoryBundle> {
    let fw = FlowWeights::exact(spec, &base.grid)?;
    second_variation_with(spec, base, y, u, win, w, &fw)
}

/// `(y^{n,ε}, z^{n,ε})`: the variations with mollified measures in the past integrals of the
/// variation processes; coefficients and their derivatives stay along the original base.
pub fn simulate_regularized_variations(
    spec: &ProblemSpec,
    n: usize,
    base: &TrajectoryBundle,
    u: &ControlPath,
    win: &SpikeWindow,
    w: &BrownianBundle,
) -> Result<(TrajectoryBundle, TrajectoryBundle)> {
    if n == 0 {
        return Err(Error::Domain("mollification index must be at least 1".into()));
    }
    let fw = FlowWeights::mollified(spec, &base.grid, n)?;
    let y = first_variation_with(spec, base, u, win, w, &fw)?;
    let z = second_variation_with(spec, base, &y, u, win, w, &fw)?;
    Ok((y, z))
}

pub fn first_variation_with(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    u: &ControlPath,
    win: &SpikeWindow,
    w: &BrownianBundle,
    fw: &FlowWeights,
) -> Result<TrajectoryBundle> {
    check_inputs(spec, u, w)?;
    check_base(spec, base, w)?;
    let ev = BaseEval::new(spec, base, u)?;
    let range = win.steps(&w.grid)?;
    let grid = w.grid;
    let (d, m, lag) = (spec.state_dim, spec.noise_dim, grid.lag);
    let ue = spike(u, win, &grid)?;
    let mut out = TrajectoryBundle::zeros(
        Label::FirstVariation,
        variation_provenance(base, &ue, fw.mollification),
        grid,
        w.paths,
        d,
    );
    if range.is_empty() {
        return Ok(out);
    }
    let stride = grid.history_nodes() * d;
    let failures: Vec<Option<usize>> = out
        .values
        .par_chunks_mut(stride)
        .enumerate()
        .map_init(
            || {
                (
                    spec.new_jets(),
                    spec.new_jets(),
                    NodeArgs::new(d),
                    [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
                    PrefixSum::new(grid.history_nodes(), d),
                )
            },
            |(jets, jv, a, [jb, js, yv], prefix), (p, series)| {
                prefix.reset();
                for i in range.start..grid.steps {
                    let end = i + lag;
                    prefix.extend(series, end);
                    ev.args(p, i, a);
                    ev.coefficients(i, u.at(p, i), a, Order::First, jets);
                    let spiked = range.contains(&i);
                    if spiked {
                        ev.coefficients(i, ue.at(p, i), a, Order::Value, jv);
                    }
                    fw.b.apply_prefix(series, prefix, d, end, jb);
                    fw.sigma.apply_prefix(series, prefix, d, end, js);
                    let dw = w.increment(p, i);
                    yv.copy_from_slice(&series[end * d..(end + 1) * d]);
                    let mut ok = true;
                    for j in 0..d {
                        let mut v = yv[j] + add_linear(&jets.b, yv, jb, j) * grid.dt;
                        for k in 0..m {
                            let o = j * m + k;
                            let mut s = add_linear(&jets.sigma, yv, js, o);
                            if spiked {
                                s += jv.sigma.value[o] - jets.sigma.value[o];
                            }
                            v += s * dw[k];
                        }
                        ok &= v.is_finite();
                        series[(end + 1) * d + j] = v;
                    }
                    if !ok {
                        return Some(i + 1);
                    }
                }
                None
            },
        )
        .collect();
    first_divergence(failures)?;
    Ok(out)
}

pub fn second_variation_with(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    y: &TrajectoryBundle,
    u: &ControlPath,
    win: &SpikeWindow,
    w: &BrownianBundle,
    fw: &FlowWeights,
) -> Result<TrajectoryBundle> {
    check_inputs(spec, u, w)?;
    check_base(spec, base, w)?;
    if y.grid != base.grid || y.paths != base.paths || y.label != Label::FirstVariation {
        return Err(Error::Consistency("second variation needs the first variation on the same bundle".into()));
    }
    let ev = BaseEval::new(spec, base, u)?;
    let range = win.steps(&w.grid)?;
    let grid = w.grid;
    let (d, m, lag) = (spec.state_dim, spec.noise_dim, grid.lag);
    let ue = spike(u, win, &grid)?;
    let mut out = TrajectoryBundle::zeros(
        Label::SecondVariation,
        variation_provenance(base, &ue, fw.mollification),
        grid,
        w.paths,
        d,
    );
    if range.is_empty() {
        return Ok(out);
    }
    let stride = grid.history_nodes() * d;
    let failures: Vec<Option<usize>> = out
        .values
        .par_chunks_mut(stride)
        .enumerate()
        .map_init(
            || {
                (
                    spec.new_jets(),
                    spec.new_jets(),
                    NodeArgs::new(d),
                    [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
                    PrefixSum::new(grid.history_nodes(), d),
                    PrefixSum::new(grid.history_nodes(), d),
                )
            },
            |(jets, jv, a, buf, pz, py), (p, series)| {
                let ys = y.path(p);
                pz.reset();
                py.reset();
                for i in range.start..grid.steps {
                    let end = i + lag;
                    pz.extend(series, end);
                    py.extend(ys, end);
                    ev.args(p, i, a);
                    ev.coefficients(i, u.at(p, i), a, Order::Second, jets);
                    let spiked = range.contains(&i);
                    if spiked {
                        ev.coefficients(i, ue.at(p, i), a, Order::First, jv);
                    }
                    let [zb, zs, yb, ysg, zv] = buf;
                    fw.b.apply_prefix(series, pz, d, end, zb);
                    fw.sigma.apply_prefix(series, pz, d, end, zs);
                    fw.b.apply_prefix(ys, py, d, end, yb);
                    fw.sigma.apply_prefix(ys, py, d, end, ysg);
                    let yv = &ys[end * d..(end + 1) * d];
                    zv.copy_from_slice(&series[end * d..(end + 1) * d]);
                    let dw = w.increment(p, i);
                    let mut ok = true;
                    for j in 0..d {
                        let mut drift = add_linear(&jets.b, zv, zb, j) + 0.5 * quad(&jets.b, yv, yb, j);
                        if spiked {
                            drift += jv.b.value[j] - jets.b.value[j];
                        }
                        let mut v = zv[j] + drift * grid.dt;
                        for k in 0..m {
                            let o = j * m + k;
                            let mut s = add_linear(&jets.sigma, zv, zs, o) + 0.5 * quad(&jets.sigma, yv, ysg, o);
                            if spiked {
                                s += add_linear(&jv.sigma, yv, ysg, o) - add_linear(&jets.sigma, yv, ysg, o);
                            }
                            v += s * dw[k];
                        }
                        ok &= v.is_finite();
                        series[(end + 1) * d + j] = v;
                    }
                    if !ok {
                        return Some(i + 1);
                    }
                }
                None
            },
        )
        .collect();
    first_divergence(failures)?;
    Ok(out)
}

// ---------------------------------------------------------------------------------------------
// Linearized flows

/// Homogeneous linearized flow `y^{s,h}`: equal to `h` at `s`, zero before, coefficients
/// frozen along the base pair.
pub fn simulate_linearized(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    s: f64,
    h: &[f64],
    u: &ControlPath,
    w: &BrownianBundle,
) -> Result<TrajectoryBundle> {
    let fw = FlowWeights::exact(spec, &base.grid)?;
    let i0 = base.grid.index_of(s)?;
    linearized_with(spec, base, i0, h, u, w, &fw)
}

/// Same flow with mollified measures in the flow's own past integrals.
pub fn simulate_linearized_regularized(
    spec: &ProblemSpec,
    n: usize,
    base: &TrajectoryBundle,
    s: f64,
    h: &[f64],
    u: &ControlPath,
    w: &BrownianBundle,
) -> Result<TrajectoryBundle> {
    let fw = FlowWeights::mollified(spec, &base.grid, n)?;
    let i0 = base.grid.index_of(s)?;
    linearized_with(spec, base, i0, h, u, w, &fw)
}

pub fn linearized_with(
    spec: &ProblemSpec,
    base: &TrajectoryBundle,
    start: usize,
    h: &[f64],
    u: &ControlPath,
    w: &BrownianBundle,
    fw: &FlowWeights,
) -> Result<TrajectoryBundle> {
    check_inputs(spec, u, w)?;
    check_base(spec, base, w)?;
    let d = spec.state_dim;
    if h.len() != d {
        return Err(Error::Shape(format!("direction has length {}, state has {d}", h.len())));
    }
    let grid = w.grid;
    if start > grid.steps {
        return Err(Error::Domain("start time beyond the horizon".into()));
    }
    let mut out = TrajectoryBundle::zeros(
        Label::Linearized,
        variation_provenance(base, u, fw.mollification),
        grid,
        w.paths,
        d,
    );
    let stride = grid.history_nodes() * d;
    let ev = BaseEval::new(spec, base, u)?;
    let lag = grid.lag;
    let failures: Vec<Option<usize>> = out
        .values
        .par_chunks_mut(stride)
        .enumerate()
        .map_init(
            || FlowScratch::new(spec, grid),
            |sc, (p, series)| {
                series[(start + lag) * d..(start + lag + 1) * d].copy_from_slice(h);
                linear_flow_path(&ev, fw, w, p, start, series, sc)
            },
        )
        .collect();
    first_divergence(failures)?;
    Ok(out)
}

/// Per-worker buffers for linearized flows.
pub struct FlowScratch {
    pub jets: Jets,
    pub args: NodeArgs,
    jb: Vec<f64>,
    js: Vec<f64>,
    yv: Vec<f64>,
    prefix: PrefixSum,
}

impl FlowScratch {
    pub fn new(spec: &ProblemSpec, grid: TimeGrid) -> Self {
        let d = spec.state_dim;
        Self {
            jets: spec.new_jets(),
            args: NodeArgs::new(d),
            jb: vec![0.0; d],
            js: vec![0.0; d],
            yv: vec![0.0; d],
            prefix: PrefixSum::new(grid.history_nodes(), d),
        }
    }
}

/// Propagates a homogeneous linearized flow on one path from node `start` to `N`; the
/// series must hold the initial value at `start` and zeros before it.
pub fn linear_flow_path(
    ev: &BaseEval,
    fw: &FlowWeights,
    w: &BrownianBundle,
    p: usize,
    start: usize,
    series: &mut [f64],
    sc: &mut FlowScratch,
) -> Option<usize> {
    let grid = ev.grid;
    let (d, m, lag) = (ev.spec.state_dim, ev.spec.noise_dim, grid.lag);
    let FlowScratch { jets, args: a, jb, js, yv, prefix } = sc;
    prefix.reset();
    for i in start..grid.steps {
        let end = i + lag;
        prefix.extend(series, end);
        ev.args(p, i, a);
        ev.coefficients(i, ev.control.at(p, i), a, Order::First, jets);
        fw.b.apply_prefix(series, prefix, d, end, jb);
        fw.sigma.apply_prefix(series, prefix, d, end, js);
        yv.copy_from_slice(&series[end * d..(end + 1) * d]);
        let dw = w.increment(p, i);
        let mut ok = true;
        for j in 0..d {
            let mut v = yv[j] + add_linear(&jets.b, yv, jb, j) * grid.dt;
            for k in 0..m {
                v += add_linear(&jets.sigma, yv, js, j * m + k) * dw[k];
            }
            ok &= v.is_finite();
            series[(end + 1) * d + j] = v;
        }
        if !ok {
            return Some(i + 1);
        }
    }
    None
}

// ---------------------------------------------------------------------------------------------
// Cost

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRule {
    /// `Σ ℓ(tᵢ) Δt` over `i = 0..N-1`, consistent with the Euler scheme.
    #[default]
    LeftPoint,
    /// `Σ ½(ℓ(tᵢ) + ℓ(tᵢ₊₁)) Δt`, holding the control of step `i` on the whole step.
    Trapezoid,
}

/// Per-path realized cost.
pub fn cost_per_path(spec: &ProblemSpec, traj: &TrajectoryBundle, u: &ControlPath, rule: TimeRule) -> Result<Vec<f64>> {
    let ev = BaseEval::new(spec, traj, u)?;
    if let Some(m) = u.paths {
        if m != traj.paths {
            return Err(Error::Shape("control and trajectory differ in path count".into()));
        }
    }
    let grid = traj.grid;
    let d = spec.state_dim;
    let out: Vec<f64> = (0..traj.paths)
        .into_par_iter()
        .map_init(
            || (spec.new_jets(), NodeArgs::new(d)),
            |(jets, a), p| {
                let ell = |i: usize, k: usize, jets: &mut Jets, a: &mut NodeArgs| {
                    ev.args(p, i, a);
                    let t = grid.time(i as isize);
                    jets.ell.reset(Order::Value);
                    spec.running_cost
                        .eval(t, &a.x, &a.yl, &spec.control_set[k], Order::Value, &mut jets.ell);
                    jets.ell.value[0]
                };
                let mut terms = Vec::with_capacity(grid.steps + 1);
                for i in 0..grid.steps {
                    let k = u.at(p, i);
                    let v = match rule {
                        TimeRule::LeftPoint => ell(i, k, jets, a),
                        TimeRule::Trapezoid => 0.5 * (ell(i, k, jets, a) + ell(i + 1, k, jets, a)),
                    };
                    terms.push(v * grid.dt);
                }
                ev.args(p, grid.steps, a);
                ev.terminal(a, Order::Value, jets);
                terms.push(jets.h.value[0]);
                crate::stats::pairwise_sum(&terms)
            },
        )
        .collect();
    if let Some(p) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Evaluation {
            what: "cost".into(),
            point: format!("path {p}"),
        });
    }
    Ok(out)
}

/// Monte Carlo estimate of the cost with its standard error.
pub fn cost(spec: &ProblemSpec, traj: &TrajectoryBundle, u: &ControlPath) -> Result<Estimate> {
    cost_with(spec, traj, u, TimeRule::LeftPoint)
}

pub fn cost_with(spec: &ProblemSpec, traj: &TrajectoryBundle, u: &ControlPath, rule: TimeRule) -> Result<Estimate> {
    Ok(mean_stderr(&cost_per_path(spec, traj, u, rule)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{scenario_lq_delay, History, LqDelayParams, MeasureChoice};
    use crate::paths::{make_grid, sample_brownian};
    use std::sync::Arc;

    fn bundle(t: f64, n: usize, d: f64, m: usize, seed: u64) -> BrownianBundle {
        sample_brownian(make_grid(t, n, d).unwrap(), m, 1, seed).unwrap()
    }

    fn lq(p: LqDelayParams) -> ProblemSpec {
        scenario_lq_delay(&p).unwrap()
    }

    #[test]
    fn spike_replaces_single_node() {
        let g = make_grid(1.0, 4, 0.5).unwrap();
        let u = ControlPath::constant(4, 0);
        let ue = spike(&u, &SpikeWindow { start: 0.25, width: 0.25, value: 1 }, &g).unwrap();
        assert_eq!(ue.index, vec![0, 1, 0, 0]);
    }

    #[test]
    fn empty_spike_is_identity() {
        let g = make_grid(1.0, 4, 0.5).unwrap();
        let u = ControlPath::constant(4, 0);
        let ue = spike(&u, &SpikeWindow { start: 0.5, width: 0.0, value: 1 }, &g).unwrap();
        assert_eq!(ue, u);
    }

    #[test]
    fn full_spike_is_constant_replacement() {
        let g = make_grid(1.0, 4, 0.5).unwrap();
        let u = ControlPath::constant(4, 0);
        let ue = spike(&u, &SpikeWindow { start: 0.0, width: 1.0, value: 1 }, &g).unwrap();
        assert_eq!(ue, ControlPath::constant(4, 1));
    }

    #[test]
    fn spike_outside_horizon_is_rejected() {
        let g = make_grid(1.0, 4, 0.5).unwrap();
        let u = ControlPath::constant(4, 0);
        let r = spike(&u, &SpikeWindow { start: 0.75, width: 0.5, value: 1 }, &g);
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn zero_dynamics_freeze_the_state() {
        let spec = lq(LqDelayParams { b_u: 0.0, x0: 1.5, ..Default::default() });
        let w = bundle(1.0, 16, 1.0, 4, 1);
        let x = simulate_state(&spec, &ControlPath::constant(16, 1), &w).unwrap();
        assert!(x.raw().iter().all(|v| *v == 1.5));
    }

    #[test]
    fn linear_ode_reaches_e() {
        let spec = lq(LqDelayParams { a0: 1.0, b_u: 0.0, mu_b: MeasureChoice::None, ..Default::default() });
        for n in [256usize, 512] {
            let w = bundle(1.0, n, 1.0, 1, 1);
            let x = simulate_state(&spec, &ControlPath::constant(n, 0), &w).unwrap();
            let err = (x.terminal(0)[0] - std::f64::consts::E).abs();
            assert!(err < 2.0 * std::f64::consts::E / n as f64, "n={n} err={err}");
        }
    }

    #[test]
    fn pure_delay_method_of_steps() {
        let spec = lq(LqDelayParams { a1: 1.0, b_u: 0.0, horizon: 2.0, ..Default::default() });
        let n = 1024;
        let w = bundle(2.0, n, 1.0, 1, 1);
        let x = simulate_state(&spec, &ControlPath::constant(n, 0), &w).unwrap();
        let dt = 2.0 / n as f64;
        assert!((x.at(0, (n / 2) as isize)[0] - 2.0).abs() < 2.0 * dt);
        assert!((x.terminal(0)[0] - 3.5).abs() < 2.0 * dt);
    }

    #[test]
    fn divergence_reports_step() {
        let mut spec = lq(LqDelayParams { b_u: 0.0, ..Default::default() });
        spec.drift = Arc::new(|_t: f64, x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = if x[0] > 3.0 { f64::INFINITY } else { 1e3 };
        });
        let w = bundle(1.0, 16, 1.0, 2, 1);
        let r = simulate_state(&spec, &ControlPath::constant(16, 0), &w);
        assert!(matches!(r, Err(Error::Divergence { step: 2, path: 0 })), "{r:?}");
    }

    #[test]
    fn crn_spiked_state_matches_before_window() {
        let spec = lq(LqDelayParams { a0: 0.3, s0: 0.4, c_u: 1.0, delay: 0.5, ..Default::default() });
        let w = bundle(1.0, 32, 0.5, 16, 5);
        let u = ControlPath::constant(32, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let win = SpikeWindow { start: 0.5, width: 0.125, value: 1 };
        let xe = simulate_spiked(&spec, &u, &win, &w).unwrap();
        for p in 0..16 {
            for i in -16..=16 {
                assert_eq!(x.at(p, i), xe.at(p, i));
            }
            assert_ne!(x.at(p, 17), xe.at(p, 17));
        }
    }

    #[test]
    fn variations_vanish_without_forcing() {
        let spec = lq(LqDelayParams { a0: 0.3, s0: 0.4, c_u: 0.0, delay: 0.5, ..Default::default() });
        let w = bundle(1.0, 32, 0.5, 8, 5);
        let u = ControlPath::constant(32, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let win = SpikeWindow { start: 0.25, width: 0.125, value: 1 };
        let y = simulate_first_variation(&spec, &x, &u, &win, &w).unwrap();
        assert!(y.raw().iter().all(|v| *v == 0.0));
        let empty = SpikeWindow { start: 0.25, width: 0.0, value: 1 };
        let spec2 = lq(LqDelayParams { c_u: 1.0, delay: 0.5, ..Default::default() });
        let x2 = simulate_state(&spec2, &u, &w).unwrap();
        let y2 = simulate_first_variation(&spec2, &x2, &u, &empty, &w).unwrap();
        let z2 = simulate_second_variation(&spec2, &x2, &y2, &u, &empty, &w).unwrap();
        assert!(y2.raw().iter().chain(z2.raw()).all(|v| *v == 0.0));
    }

    #[test]
    fn second_variation_vanishes_for_linear_noise_forcing_only() {
        // δb = 0 (b_u = 0), δσ_x = δσ_y = 0 (c_xu = 0), linear coefficients.
        let spec = lq(LqDelayParams { a0: 0.3, a1: 0.2, b_u: 0.0, s0: 0.4, c_u: 1.0, delay: 0.5, ..Default::default() });
        let w = bundle(1.0, 32, 0.5, 8, 5);
        let u = ControlPath::constant(32, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let win = SpikeWindow { start: 0.25, width: 0.125, value: 1 };
        let y = simulate_first_variation(&spec, &x, &u, &win, &w).unwrap();
        let z = simulate_second_variation(&spec, &x, &y, &u, &win, &w).unwrap();
        assert!(y.raw().iter().any(|v| *v != 0.0));
        assert!(z.raw().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_first_variation_is_exact_difference() {
        // For linear dynamics with additive control noise, x^ε - x = y^ε pathwise.
        let spec = lq(LqDelayParams { a0: 0.3, a1: -0.5, b_u: 0.0, s0: 0.4, s1: 0.2, c_u: 1.0, delay: 0.5, ..Default::default() });
        let w = bundle(1.0, 32, 0.5, 8, 7);
        let u = ControlPath::constant(32, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let win = SpikeWindow { start: 0.25, width: 0.25, value: 1 };
        let xe = simulate_spiked(&spec, &u, &win, &w).unwrap();
        let y = simulate_first_variation(&spec, &x, &u, &win, &w).unwrap();
        let r = xe.sup_sq_combination(&[&x, &y]);
        assert!(r.iter().all(|v| *v < 1e-24), "{r:?}");
    }

    #[test]
    fn linearized_flow_with_frozen_dynamics_is_constant() {
        let spec = lq(LqDelayParams { b_u: 0.0, ..Default::default() });
        let w = bundle(1.0, 16, 1.0, 3, 2);
        let u = ControlPath::constant(16, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let y = simulate_linearized(&spec, &x, 0.25, &[0.7], &u, &w).unwrap();
        for p in 0..3 {
            for i in -16..=16isize {
                let want = if i >= 4 { 0.7 } else { 0.0 };
                assert_eq!(y.at(p, i)[0], want);
            }
        }
    }

    #[test]
    fn linearized_flow_is_linear_in_direction() {
        let spec = lq(LqDelayParams { a0: 0.3, a1: -0.5, s0: 0.4, s1: 0.2, kappa_b: 0.3, delay: 0.5, ..Default::default() });
        let w = bundle(1.0, 32, 0.5, 4, 3);
        let u = ControlPath::constant(32, 1);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let a = simulate_linearized(&spec, &x, 0.25, &[1.0], &u, &w).unwrap();
        let b = simulate_linearized(&spec, &x, 0.25, &[2.0], &u, &w).unwrap();
        for (va, vb) in a.raw().iter().zip(b.raw()) {
            assert_eq!(2.0 * va, *vb);
        }
    }

    #[test]
    fn cost_examples() {
        let mut spec = lq(LqDelayParams { b_u: 0.0, x0: 2.0, terminal_weight: 0.0, ..Default::default() });
        let w = bundle(1.0, 8, 1.0, 4, 2);
        let u = ControlPath::constant(8, 0);
        let x = simulate_state(&spec, &u, &w).unwrap();
        let c = cost(&spec, &x, &u).unwrap();
        assert!((c.mean - 4.0).abs() < 1e-12 && c.stderr == 0.0);
        spec.running_cost = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = 1.0;
        });
        let c = cost_with(&spec, &x, &u, TimeRule::Trapezoid).unwrap();
        assert!((c.mean - 1.0).abs() < 1e-12);
        spec.running_cost = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, _j: &mut Jet| {});
        spec.terminal_cost = Arc::new(|_t: f64, _x: &[f64], _y: &[f64], _u: &[f64], _o: Order, j: &mut Jet| {
            j.value[0] = 1.0;
        });
        let c = cost(&spec, &x, &u).unwrap();
        assert_eq!((c.mean, c.stderr), (1.0, 0.0));
    }

    #[test]
    fn history_function_is_used() {
        let mut spec = lq(LqDelayParams { b_u: 0.0, ..Default::default() });
        spec.history = History::Function(Arc::new(|t| vec![t]));
        let w = bundle(1.0, 4, 1.0, 1, 2);
        let x = simulate_state(&spec, &ControlPath::constant(4, 0), &w).unwrap();
        assert_eq!(x.at(0, -4)[0], -1.0);
        assert_eq!(x.at(0, -2)[0], -0.5);
    }

    #[test]
    fn binary_round_trip() {
        let spec = lq(LqDelayParams { s0: 0.5, ..Default::default() });
        let w = bundle(1.0, 8, 1.0, 3, 9);
        let x = simulate_state(&spec, &ControlPath::constant(8, 0), &w).unwrap();
        let mut buf = vec![];
        x.write_binary_to(&mut buf, &serde_json::json!({"config_hash": "abc"})).unwrap();
        let back = TrajectoryBundle::read_binary_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let spec = lq(LqDelayParams::default());
        let w = bundle(1.0, 2, 1.0, 1, 9);
        let x = simulate_state(&spec, &ControlPath::constant(2, 0), &w).unwrap();
        let mut buf = vec![];
        x.write_csv_to(&mut buf, &[("config_hash", "abc".into())]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.contains("seed=9"));
        assert!(s.contains("path,t,component,value"));
        assert_eq!(s.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
    }
}
