//! Experiment runner: configuration, subcommands and report files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::absde::{duality_residual_first, duality_residual_second, solve_absde, AdjointSolution};
use crate::error::{Error, Result};
use crate::hilbert::{extract_p00, first_adjoint_with, second_adjoint_with, FirstAdjoint, HilbertContext};
use crate::model::{
    scenario_lq_delay, scenario_pointwise, scenario_portfolio, scenario_tracking, ControlPath, LqDelayParams,
    PortfolioConfig, ProblemSpec,
};
use crate::paths::{make_grid, BrownianBundle, TimeGrid};
use crate::regression::RegressionConfig;
use crate::sdde::{
    cost, cost_per_path, simulate_first_variation, simulate_regularized_variations, simulate_second_variation,
    simulate_spiked, simulate_state, SpikeWindow, TimeRule, TrajectoryBundle,
};
use crate::smp::{
    check_variational_inequality, checkpoint_times, cost_expansion_check, p00_convergence_study, p00_kernel,
    ExpansionReport, InequalityConfig, P00Field, Representation, SMPReport, SecondOrderKernel,
};
use crate::stats::{mean_stderr, Estimate};

// ---------------------------------------------------------------------------------------------
// Command line

#[derive(Debug, Parser)]
#[command(name = "sdde-smp", version, about = "Maximum-principle experiments for controlled delay SDEs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML) or a previously written manifest.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: the config `output`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides `mc.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `mc.paths`.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Overrides `grid.steps`.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Overrides `grid.delay`.
    #[arg(long, global = true)]
    pub delay: Option<f64>,
    /// Overrides `grid.horizon`.
    #[arg(long, global = true)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Forward simulation of the state (and the spiked state).
    Simulate,
    /// Anticipated adjoint, duality residuals and the product-space adjoint.
    Adjoint,
    /// Second-order variational inequality and cost expansion; exit code 1 on failure.
    Verify,
    /// ε-ladder, mollification and time-step studies.
    Converge,
    /// Portfolio problem with a brute-force search over constant strategies.
    Portfolio,
}

// ---------------------------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    LqDelay,
    Pointwise,
    Tracking,
    Portfolio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Product-space operator adjoints; atoms are read through the last mollification index.
    Density,
    /// Anticipated adjoint with the flow representation of the second-order kernel.
    General,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Overrides the scenario horizon when set.
    pub horizon: Option<f64>,
    /// Overrides the scenario delay when set.
    pub delay: Option<f64>,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: None, delay: None, steps: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { paths: 2048, seed: 1, antithetic: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// First element of the control set.
    First,
    /// Constant element `index` of the control set.
    Index,
    /// Piecewise constant from `schedule` rows `[t, v₁, …, v_k]`.
    Schedule,
    /// The scalar scenarios' target `γ(t)`.
    Target,
    /// Constant control with the smallest Monte Carlo cost.
    BestConstant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub kind: ControlKind,
    pub index: usize,
    pub schedule: Vec<Vec<f64>>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self { kind: ControlKind::First, index: 0, schedule: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeConfig {
    pub start: f64,
    /// Decreasing window widths; empty disables spike work.
    pub eps: Vec<f64>,
    /// Spike value; the last element of the control set when absent.
    pub value: Option<Vec<f64>>,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self { start: 0.25, eps: vec![], value: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MollificationConfig {
    pub n: Vec<usize>,
}

impl Default for MollificationConfig {
    fn default() -> Self {
        Self { n: vec![4, 8, 16, 32] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    /// Start time of the kernel studies.
    pub s: f64,
    /// Direction of the quadratic form; the first unit vector when empty.
    pub h: Vec<f64>,
    /// Number of step halvings in the time-step study.
    pub refinements: usize,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self { s: 0.0, h: vec![], refinements: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioName,
    pub pipeline: Pipeline,
    pub output: PathBuf,
    /// Scenario parameters: the scalar-scenario fields or the portfolio fields.
    pub params: toml::Table,
    pub grid: GridConfig,
    pub mc: McConfig,
    pub control: ControlConfig,
    pub spike: SpikeConfig,
    pub mollification: MollificationConfig,
    pub regression: RegressionConfig,
    pub inequality: InequalityConfig,
    pub converge: ConvergeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioName::LqDelay,
            pipeline: Pipeline::General,
            output: PathBuf::from("out"),
            params: toml::Table::new(),
            grid: GridConfig::default(),
            mc: McConfig::default(),
            control: ControlConfig::default(),
            spike: SpikeConfig::default(),
            mollification: MollificationConfig::default(),
            regression: RegressionConfig::default(),
            inequality: InequalityConfig::default(),
            converge: ConvergeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a TOML config, or the `config` entry of a manifest written by a previous run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let cfg = v
                .get("config")
                .ok_or_else(|| Error::Config(format!("{} has no config entry", path.display())))?;
            return Ok(serde_json::from_value(cfg.clone())?);
        }
        Self::from_toml(&text)
    }

    pub fn apply_overrides(&mut self, g: &GlobalArgs) {
        if let Some(s) = g.seed {
            self.mc.seed = s;
        }
        if let Some(p) = g.paths {
            self.mc.paths = p;
        }
        if let Some(n) = g.steps {
            self.grid.steps = n;
        }
        if let Some(d) = g.delay {
            self.grid.delay = Some(d);
        }
        if let Some(t) = g.horizon {
            self.grid.horizon = Some(t);
        }
        if let Some(o) = &g.out {
            self.output = o.clone();
        }
    }

    /// SHA-256 of the canonical JSON form; the output directory is not part of it.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let bytes = serde_json::to_vec(&c)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------------------------
// Resolved experiment

/// A config turned into a problem, a grid and a control rule.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ProblemSpec,
    pub grid: TimeGrid,
    pub hash: String,
    lq: Option<LqDelayParams>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let hash = config.hash()?;
        let mut params = config.params.clone();
        if let Some(t) = config.grid.horizon {
            params.insert("horizon".into(), toml::Value::Float(t));
        }
        if let Some(d) = config.grid.delay {
            params.insert("delay".into(), toml::Value::Float(d));
        }
        let params = toml::Value::Table(params);
        let (spec, lq) = match config.scenario {
            ScenarioName::Portfolio => {
                let p: PortfolioConfig = params.try_into()?;
                (scenario_portfolio(&p.params()?)?, None)
            }
            name => {
                let p: LqDelayParams = params.try_into()?;
                let spec = match name {
                    ScenarioName::LqDelay => scenario_lq_delay(&p)?,
                    ScenarioName::Pointwise => scenario_pointwise(&p)?,
                    _ => scenario_tracking(&p)?,
                };
                (spec, Some(p))
            }
        };
        let grid = make_grid(spec.horizon, config.grid.steps, spec.delay)?;
        for &e in &config.spike.eps {
            grid.steps_in(e)?;
        }
        if config.mc.paths == 0 {
            return Err(Error::Config("mc.paths must be positive".into()));
        }
        Ok(Self { config, spec, grid, hash, lq })
    }

    pub fn seed(&self) -> u64 {
        self.config.mc.seed
    }

    pub fn brownian(&self, grid: TimeGrid) -> Result<BrownianBundle> {
        let mc = &self.config.mc;
        BrownianBundle::generate(grid, mc.paths, self.spec.noise_dim, mc.seed, mc.antithetic)
    }

    /// The configured control on `grid`; the best constant is searched on the bundle `w`.
    pub fn control(&self, grid: &TimeGrid, w: &BrownianBundle) -> Result<ControlPath> {
        let c = &self.config.control;
        let nu = self.spec.control_set.len();
        match c.kind {
            ControlKind::First => Ok(ControlPath::constant(grid.steps, 0)),
            ControlKind::Index => {
                if c.index >= nu {
                    return Err(Error::Config(format!("control index {} outside a set of {nu}", c.index)));
                }
                Ok(ControlPath::constant(grid.steps, c.index))
            }
            ControlKind::Schedule => {
                let k = self.spec.control_dim;
                if c.schedule.is_empty() || c.schedule.iter().any(|r| r.len() != k + 1) {
                    return Err(Error::Config(format!("schedule rows must be [t, {k} control values]")));
                }
                let rows = c.schedule.clone();
                ControlPath::from_fn(&self.spec, grid, move |t| {
                    let mut v = rows[0][1..].to_vec();
                    for r in &rows {
                        if t + 1e-12 >= r[0] {
                            v = r[1..].to_vec();
                        }
                    }
                    v
                })
            }
            ControlKind::Target => {
                let p = self
                    .lq
                    .clone()
                    .ok_or_else(|| Error::Config("the target control needs a scalar scenario".into()))?;
                ControlPath::from_fn(&self.spec, grid, move |t| vec![p.target_at(t)])
            }
            ControlKind::BestConstant => Ok(ControlPath::constant(grid.steps, self.best_constant(w)?.0)),
        }
    }

    /// Index of the cheapest constant control and the cost of every constant control.
    pub fn best_constant(&self, w: &BrownianBundle) -> Result<(usize, Vec<Estimate>)> {
        let mut costs = Vec::with_capacity(self.spec.control_set.len());
        for k in 0..self.spec.control_set.len() {
            let u = ControlPath::constant(w.grid.steps, k);
            let x = simulate_state(&self.spec, &u, w)?;
            costs.push(cost(&self.spec, &x, &u)?);
        }
        let mut best = 0;
        for (k, c) in costs.iter().enumerate() {
            if c.mean < costs[best].mean {
                best = k;
            }
        }
        Ok((best, costs))
    }

    pub fn spike_windows(&self) -> Result<Vec<SpikeWindow>> {
        let s = &self.config.spike;
        let value = match &s.value {
            Some(v) => self
                .spec
                .control_index(v)
                .ok_or_else(|| Error::Config(format!("spike value {v:?} is not in the control set")))?,
            None => self.spec.control_set.len() - 1,
        };
        Ok(s.eps.iter().map(|&width| SpikeWindow { start: s.start, width, value }).collect())
    }

    /// Mollification index used by the product-space pipeline.
    fn density_index(&self) -> Result<Option<usize>> {
        if !self.spec.has_atoms() {
            return Ok(None);
        }
        match self.config.mollification.n.last() {
            Some(&n) => Ok(Some(n)),
            None => Err(Error::Config("the density pipeline needs a mollification index for atoms".into())),
        }
    }

    fn direction(&self) -> Result<Vec<f64>> {
        let d = self.spec.state_dim;
        let h = &self.config.converge.h;
        if h.is_empty() {
            let mut e = vec![0.0; d];
            e[0] = 1.0;
            return Ok(e);
        }
        if h.len() != d {
            return Err(Error::Config(format!("converge.h must have {d} entries")));
        }
        Ok(h.clone())
    }
}

// ---------------------------------------------------------------------------------------------
// Output files

/// Writes data files tagged with the config hash and seed and records their digests.
pub struct Outputs {
    dir: PathBuf,
    hash: String,
    seed: u64,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path, hash: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), hash: hash.to_string(), seed, files: vec![] })
    }

    fn header(&self) -> Vec<(&'static str, String)> {
        vec![("config_hash", self.hash.clone()), ("seed", self.seed.to_string())]
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.files.push((name.to_string(), hex(&Sha256::digest(&bytes))));
        Ok(())
    }

    /// CSV with the hash and seed as leading comment lines.
    fn csv(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        let mut out = BufWriter::new(File::create(self.dir.join(name))?);
        for (k, v) in self.header() {
            writeln!(out, "# {k}={v}")?;
        }
        body(&mut out)?;
        out.flush()?;
        drop(out);
        self.record(name)
    }

    /// Plot-ready `x,y,stderr` series.
    fn series(&mut self, name: &str, rows: &[(f64, f64, f64)]) -> Result<()> {
        self.csv(name, |out| {
            writeln!(out, "x,y,stderr")?;
            for (x, y, s) in rows {
                writeln!(out, "{x:e},{y:e},{s:e}")?;
            }
            Ok(())
        })
    }

    fn json(&mut self, name: &str, data: &impl Serialize) -> Result<()> {
        let doc = serde_json::json!({ "config_hash": self.hash, "seed": self.seed, "data": data });
        std::fs::write(self.dir.join(name), serde_json::to_string_pretty(&doc)?)?;
        self.record(name)
    }

    fn bundle(&mut self, name: &str, b: &TrajectoryBundle) -> Result<()> {
        b.write_csv(&self.dir.join(name), &self.header())?;
        self.record(name)
    }

    fn kernel(&mut self, name: &str, k: &SecondOrderKernel) -> Result<()> {
        self.csv(name, |out| k.write_csv_to(out))
    }

    fn smp(&mut self, stem: &str, r: &SMPReport) -> Result<()> {
        self.json(&format!("{stem}.json"), r)?;
        self.csv(&format!("{stem}.csv"), |out| r.write_csv_to(out))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub files: Vec<FileDigest>,
    pub verdicts: Vec<(String, bool)>,
    pub passed: bool,
    /// Seconds since the Unix epoch; the only field that varies between reruns.
    pub timestamp: u64,
}

/// Outcome of one subcommand.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub verdicts: Vec<(String, bool)>,
    pub passed: bool,
}

// ---------------------------------------------------------------------------------------------
// Runner

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(s) => {
            eprintln!("outputs written to {}", s.out_dir.display());
            if s.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(cli: &Cli) -> Result<RunSummary> {
    let mut config = match &cli.global.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            if cli.command == Command::Portfolio {
                c.scenario = ScenarioName::Portfolio;
            }
            c
        }
    };
    config.apply_overrides(&cli.global);
    let workers = cli.global.workers.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run_config(cli.command, config))
}

pub fn run_config(command: Command, config: ExperimentConfig) -> Result<RunSummary> {
    let exp = Experiment::new(config)?;
    let mut out = Outputs::new(&exp.config.output, &exp.hash, exp.seed())?;
    eprintln!(
        "{:?}: scenario {} N={} paths={} seed={} hash={}",
        command,
        exp.spec.name,
        exp.grid.steps,
        exp.config.mc.paths,
        exp.seed(),
        &exp.hash[..12]
    );
    let verdicts = match command {
        Command::Simulate => cmd_simulate(&exp, &mut out)?,
        Command::Adjoint => cmd_adjoint(&exp, &mut out)?,
        Command::Verify => cmd_verify(&exp, &mut out)?,
        Command::Converge => cmd_converge(&exp, &mut out)?,
        Command::Portfolio => cmd_portfolio(&exp, &mut out)?,
    };
    for (name, ok) in &verdicts {
        eprintln!("verdict {name}: {}", if *ok { "pass" } else { "FAIL" });
    }
    let passed = verdicts.iter().all(|(_, ok)| *ok);
    let manifest = Manifest {
        command,
        config_hash: exp.hash.clone(),
        seed: exp.seed(),
        config: exp.config.clone(),
        files: out.files.iter().map(|(n, s)| FileDigest { name: n.clone(), sha256: s.clone() }).collect(),
        verdicts: verdicts.clone(),
        passed,
        timestamp: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    std::fs::write(out.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunSummary { out_dir: out.dir.clone(), verdicts, passed })
}

struct Base {
    w: BrownianBundle,
    u: ControlPath,
    x: TrajectoryBundle,
}

fn base(exp: &Experiment) -> Result<Base> {
    let w = exp.brownian(exp.grid)?;
    let u = exp.control(&exp.grid, &w)?;
    let x = simulate_state(&exp.spec, &u, &w)?;
    Ok(Base { w, u, x })
}

#[derive(Serialize)]
struct CostSummary {
    base: Estimate,
    spiked: Option<Estimate>,
    spike: Option<SpikeWindow>,
}

pub fn cmd_simulate(exp: &Experiment, out: &mut Outputs) -> Result<Vec<(String, bool)>> {
    let b = base(exp)?;
    out.bundle("trajectory.csv", &b.x)?;
    let meta = serde_json::json!({ "config_hash": exp.hash, "seed": exp.seed() });
    b.x.write_binary(&out.dir.join("trajectory.bin"), &meta)?;
    out.record("trajectory.bin")?;
    let mut summary = CostSummary { base: cost(&exp.spec, &b.x, &b.u)?, spiked: None, spike: None };
    if let Some(win) = exp.spike_windows()?.first() {
        let xe = simulate_spiked(&exp.spec, &b.u, win, &b.w)?;
        out.bundle("spiked.csv", &xe)?;
        let ue = crate::sdde::spike(&b.u, win, &exp.grid)?;
        summary.spiked = Some(cost(&exp.spec, &xe, &ue)?);
        summary.spike = Some(*win);
    }
    eprintln!("cost {:.6} ± {:.2e}", summary.base.mean, summary.base.stderr);
    out.json("cost.json", &summary)?;
    Ok(vec![])
}

#[derive(Serialize)]
struct DualitySummary {
    window: SpikeWindow,
    first: crate::absde::DualityReport,
    second: crate::absde::DualityReport,
    first_within_3se: bool,
    second_within_3se: bool,
}

pub fn cmd_adjoint(exp: &Experiment, out: &mut Outputs) -> Result<Vec<(String, bool)>> {
    let b = base(exp)?;
    let adj = solve_absde(&exp.spec, &b.x, &b.u, &b.w, &exp.config.regression)?;
    adj.write_csv(&out.dir.join("adjoint.csv"), &out.header())?;
    out.record("adjoint.csv")?;
    if let Some(win) = exp.spike_windows()?.first() {
        let y = simulate_first_variation(&exp.spec, &b.x, &b.u, win, &b.w)?;
        let z = simulate_second_variation(&exp.spec, &b.x, &y, &b.u, win, &b.w)?;
        let first = duality_residual_first(&exp.spec, &b.x, &y, &b.u, &adj, win)?;
        let second = duality_residual_second(&exp.spec, &b.x, &y, &z, &b.u, &adj, win)?;
        eprintln!(
            "duality residuals: first {:.3e} ± {:.1e}, second {:.3e} ± {:.1e}",
            first.residual, first.stderr, second.residual, second.stderr
        );
        out.json(
            "duality.json",
            &DualitySummary {
                window: *win,
                first_within_3se: first.within(3.0),
                second_within_3se: second.within(3.0),
                first,
                second,
            },
        )?;
    }
    if exp.config.pipeline != Pipeline::General {
        let ctx = HilbertContext::new(&exp.spec, &b.x, &b.u, exp.density_index()?)?;
        let ha = first_adjoint_with(&ctx, &b.w, &exp.config.regression)?;
        let d = exp.spec.state_dim;
        out.csv("hilbert_head.csv", |o| {
            writeln!(o, "t,component,head,minus_pa")?;
            for i in 0..=exp.grid.steps {
                let h = ha.mean_head(i);
                let pa = adj.mean_p(i);
                for c in 0..d {
                    writeln!(o, "{},{c},{:e},{:e}", exp.grid.time(i as isize), h[c], -pa[c])?;
                }
            }
            Ok(())
        })?;
    }
    Ok(vec![])
}

fn general_kernel(exp: &Experiment, b: &Base, adj: &AdjointSolution) -> Result<SecondOrderKernel> {
    let rep = Representation::new(&exp.spec, &b.x, &b.u, adj, &b.w)?;
    p00_kernel(&rep, &checkpoint_times(&exp.grid)?)
}

fn density_kernel(exp: &Experiment, b: &Base) -> Result<SecondOrderKernel> {
    let cfg = &exp.config.regression;
    let ctx = HilbertContext::new(&exp.spec, &b.x, &b.u, exp.density_index()?)?;
    let ha = first_adjoint_with(&ctx, &b.w, cfg)?;
    let hp = second_adjoint_with(&ctx, FirstAdjoint::Hilbert(&ha), &b.w, cfg)?;
    Ok(extract_p00(&hp))
}

/// Expansion verdict: the remainder is of order above one, or it vanishes within noise.
fn expansion_passes(r: &ExpansionReport) -> bool {
    let negligible = r.rows.iter().all(|row| row.remainder.mean.abs() <= 3.0 * row.remainder.stderr + 1e-12);
    negligible || r.slope > 1.0
}

fn expansion(exp: &Experiment, b: &Base, adj: &AdjointSolution, kernel: Option<&SecondOrderKernel>) -> Result<ExpansionReport> {
    let ladder = exp.spike_windows()?;
    match kernel {
        Some(k) => cost_expansion_check(&exp.spec, &b.x, &b.u, &ladder, adj, P00Field::Kernel(k), &b.w),
        None => {
            let rep = Representation::new(&exp.spec, &b.x, &b.u, adj, &b.w)?;
            let start = exp.grid.index_of(exp.config.spike.start)?;
            let field = rep.conditional(start, &exp.config.regression)?;
            cost_expansion_check(&exp.spec, &b.x, &b.u, &ladder, adj, P00Field::PerPath(&field), &b.w)
        }
    }
}

pub fn cmd_verify(exp: &Experiment, out: &mut Outputs) -> Result<Vec<(String, bool)>> {
    let b = base(exp)?;
    let adj = solve_absde(&exp.spec, &b.x, &b.u, &b.w, &exp.config.regression)?;
    let mut verdicts = vec![];
    let pipe = exp.config.pipeline;
    let mut density = None;
    if pipe != Pipeline::Density {
        let k = general_kernel(exp, &b, &adj)?;
        out.kernel("p00_general.csv", &k)?;
        let r = check_variational_inequality(&exp.spec, &b.x, &b.u, &adj, &k, &exp.config.inequality)?;
        report_smp("general", &r);
        out.smp("smp_general", &r)?;
        verdicts.push(("inequality_general".to_string(), r.verdict));
    }
    if pipe != Pipeline::General {
        let k = density_kernel(exp, &b)?;
        out.kernel("p00_density.csv", &k)?;
        let r = check_variational_inequality(&exp.spec, &b.x, &b.u, &adj, &k, &exp.config.inequality)?;
        report_smp("density", &r);
        out.smp("smp_density", &r)?;
        verdicts.push(("inequality_density".to_string(), r.verdict));
        density = Some(k);
    }
    if !exp.config.spike.eps.is_empty() {
        let r = expansion(exp, &b, &adj, if pipe == Pipeline::Density { density.as_ref() } else { None })?;
        eprintln!("expansion remainder slope {:.3} (first order only {:.3})", r.slope, r.slope_first_order);
        out.json("expansion.json", &r)?;
        verdicts.push(("expansion".to_string(), expansion_passes(&r)));
    }
    Ok(verdicts)
}

fn report_smp(name: &str, r: &SMPReport) {
    eprintln!(
        "{name}: worst gap {:.3e} ± {:.1e}, {} violating times (allowed {})",
        r.worst_gap,
        r.gap_stderr,
        r.violations.len(),
        r.allowed_violations
    );
    for v in r.violations.iter().take(10) {
        eprintln!("  t={:.4} v={:?} gap={:.3e} ± {:.1e}", v.t, v.v, v.gap, v.stderr);
    }
    if r.violations.len() > 10 {
        eprintln!("  ... {} more", r.violations.len() - 10);
    }
}

#[derive(Serialize)]
struct RefinementRow {
    steps: usize,
    dt: f64,
    cost: Estimate,
    /// Paired difference to the finest grid.
    difference: Estimate,
}

pub fn cmd_converge(exp: &Experiment, out: &mut Outputs) -> Result<Vec<(String, bool)>> {
    let b = base(exp)?;
    let adj = solve_absde(&exp.spec, &b.x, &b.u, &b.w, &exp.config.regression)?;
    let mut doc = serde_json::Map::new();
    let ladder = exp.spike_windows()?;
    if !ladder.is_empty() {
        let r = expansion(exp, &b, &adj, None)?;
        let rows: Vec<_> = r.rows.iter().map(|row| (row.eps, row.remainder.mean, row.remainder.stderr)).collect();
        out.series("converge_eps.csv", &rows)?;
        let rows: Vec<_> = r
            .rows
            .iter()
            .map(|row| (row.eps, row.remainder_first_order.mean, row.remainder_first_order.stderr))
            .collect();
        out.series("converge_eps_first_order.csv", &rows)?;
        eprintln!("ε ladder: slope {:.3}, first order only {:.3}", r.slope, r.slope_first_order);
        doc.insert("expansion".into(), serde_json::to_value(&r)?);

        let win = ladder[0];
        let y = simulate_first_variation(&exp.spec, &b.x, &b.u, &win, &b.w)?;
        let mut rows = vec![];
        for &n in &exp.config.mollification.n {
            let (yn, _) = simulate_regularized_variations(&exp.spec, n, &b.x, &b.u, &win, &b.w)?;
            let e = mean_stderr(&yn.sup_sq_combination(&[&y]));
            rows.push((n as f64, e.mean, e.stderr));
        }
        out.series("converge_variation.csv", &rows)?;
        doc.insert("regularized_variation".into(), serde_json::to_value(&rows)?);
    }
    if !exp.config.mollification.n.is_empty() {
        let h = exp.direction()?;
        let r = p00_convergence_study(
            &exp.spec,
            &b.x,
            &b.u,
            &adj,
            &b.w,
            exp.config.converge.s,
            &h,
            &exp.config.mollification.n,
        )?;
        let rows: Vec<_> = r.rows.iter().map(|row| (row.n as f64, row.error.mean, row.error.stderr)).collect();
        out.series("converge_p00.csv", &rows)?;
        eprintln!("mollified kernel errors decreasing: {}", r.decreasing);
        doc.insert("p00".into(), serde_json::to_value(&r)?);
    }
    let mut bundles = vec![b.w.clone()];
    for _ in 0..exp.config.converge.refinements {
        let next = bundles.last().unwrap().coarsen()?;
        bundles.push(next);
    }
    let fine = cost_per_path(&exp.spec, &b.x, &b.u, TimeRule::LeftPoint)?;
    let mut refinement = vec![];
    for w in &bundles {
        let u = exp.control(&w.grid, w)?;
        let x = simulate_state(&exp.spec, &u, w)?;
        let c = cost_per_path(&exp.spec, &x, &u, TimeRule::LeftPoint)?;
        let diff: Vec<f64> = c.iter().zip(&fine).map(|(a, f)| a - f).collect();
        refinement.push(RefinementRow {
            steps: w.grid.steps,
            dt: w.grid.dt,
            cost: mean_stderr(&c),
            difference: mean_stderr(&diff),
        });
    }
    let rows: Vec<_> = refinement.iter().map(|r| (r.dt, r.difference.mean, r.difference.stderr)).collect();
    out.series("converge_dt.csv", &rows)?;
    doc.insert("dt_refinement".into(), serde_json::to_value(&refinement)?);
    out.json("converge.json", &doc)?;
    Ok(vec![])
}

#[derive(Serialize)]
struct PortfolioSummary {
    convention: String,
    best: Vec<f64>,
    costs: Vec<(Vec<f64>, Estimate)>,
    /// Largest `|E pᵃ¹(t)|` over the grid with its standard error: the price component of the
    /// first adjoint, claimed to vanish.
    price_adjoint_p: Estimate,
    price_adjoint_q: Estimate,
    price_adjoint_p_within_3se: bool,
    price_adjoint_q_within_3se: bool,
    inequality: SMPReport,
}

fn largest_mean(adj: &AdjointSolution, steps: usize, q: bool) -> Estimate {
    let mut worst = Estimate { mean: 0.0, stderr: 0.0 };
    for i in 0..=steps {
        if q && i == steps {
            continue;
        }
        let col: Vec<f64> = (0..adj.paths).map(|p| if q { adj.q(p, i)[0] } else { adj.p(p, i)[0] }).collect();
        let e = mean_stderr(&col);
        if e.mean.abs() > worst.mean.abs() {
            worst = e;
        }
    }
    worst
}

pub fn cmd_portfolio(exp: &Experiment, out: &mut Outputs) -> Result<Vec<(String, bool)>> {
    if exp.config.scenario != ScenarioName::Portfolio {
        return Err(Error::Config("the portfolio command needs scenario = \"portfolio\"".into()));
    }
    let w = exp.brownian(exp.grid)?;
    let (best, costs) = exp.best_constant(&w)?;
    let u = ControlPath::constant(exp.grid.steps, best);
    let x = simulate_state(&exp.spec, &u, &w)?;
    let adj = solve_absde(&exp.spec, &x, &u, &w, &exp.config.regression)?;
    let b = Base { w, u, x };
    let k = general_kernel(exp, &b, &adj)?;
    out.kernel("p00_portfolio.csv", &k)?;
    let r = check_variational_inequality(&exp.spec, &b.x, &b.u, &adj, &k, &exp.config.inequality)?;
    report_smp("portfolio", &r);
    out.smp("smp_portfolio", &r)?;
    let steps = exp.grid.steps;
    out.csv("adjoint_mean.csv", |o| {
        writeln!(o, "t,p_price,p_wealth,q_price,q_wealth")?;
        for i in 0..steps {
            let m = |f: &dyn Fn(usize) -> f64| crate::stats::mean(&(0..adj.paths).map(f).collect::<Vec<_>>());
            writeln!(
                o,
                "{},{:e},{:e},{:e},{:e}",
                exp.grid.time(i as isize),
                m(&|p| adj.p(p, i)[0]),
                m(&|p| adj.p(p, i)[1]),
                m(&|p| adj.q(p, i)[0]),
                m(&|p| adj.q(p, i)[1])
            )?;
        }
        Ok(())
    })?;
    let pp = largest_mean(&adj, steps, false);
    let pq = largest_mean(&adj, steps, true);
    eprintln!(
        "best constant (π, c) = {:?}; largest |E p¹| = {:.3e} ± {:.1e}, |E q¹| = {:.3e} ± {:.1e}",
        exp.spec.control_set[best], pp.mean, pp.stderr, pq.mean, pq.stderr
    );
    let verdict = r.verdict;
    out.json(
        "portfolio.json",
        &PortfolioSummary {
            convention: exp.spec.convention.clone(),
            best: exp.spec.control_set[best].clone(),
            costs: exp.spec.control_set.iter().cloned().zip(costs).collect(),
            price_adjoint_p_within_3se: pp.mean.abs() <= 3.0 * pp.stderr,
            price_adjoint_q_within_3se: pq.mean.abs() <= 3.0 * pq.stderr,
            price_adjoint_p: pp,
            price_adjoint_q: pq,
            inequality: r,
        },
    )?;
    Ok(vec![("inequality_portfolio".to_string(), verdict)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_hash_ignores_output() {
        let text = r#"
scenario = "tracking"
output = "a"
[params]
a0 = 0.2
controls = [-1.0, 0.0, 1.0]
target = [[0.0, 1.0], [0.5, -1.0]]
[grid]
steps = 16
[control]
kind = "target"
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        let mut d = c.clone();
        d.output = PathBuf::from("b");
        assert_eq!(c.hash().unwrap(), d.hash().unwrap());
        d.mc.seed += 1;
        assert_ne!(c.hash().unwrap(), d.hash().unwrap());
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let exp = Experiment::new(c).unwrap();
        assert_eq!(exp.grid.steps, 16);
        assert_eq!(exp.spec.name, "tracking");
    }

    #[test]
    fn unknown_keys_and_misaligned_eps_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        let c = ExperimentConfig::from_toml("[grid]\nsteps = 16\n[spike]\neps = [0.1]").unwrap();
        assert!(Experiment::new(c).is_err());
    }

    #[test]
    fn overrides_replace_config_values() {
        let mut c = ExperimentConfig::default();
        let g = GlobalArgs { seed: Some(9), paths: Some(10), steps: Some(8), delay: Some(0.5), ..Default::default() };
        c.apply_overrides(&g);
        let exp = Experiment::new(c).unwrap();
        assert_eq!(exp.seed(), 9);
        assert_eq!(exp.config.mc.paths, 10);
        assert_eq!(exp.grid.steps, 8);
        assert_eq!(exp.spec.delay, 0.5);
    }

    #[test]
    fn schedule_control_is_piecewise_constant() {
        let text = "[grid]\nsteps = 8\n[control]\nkind = \"schedule\"\nschedule = [[0.0, -1.0], [0.5, 1.0]]";
        let exp = Experiment::new(ExperimentConfig::from_toml(text).unwrap()).unwrap();
        let w = exp.brownian(exp.grid).unwrap();
        let u = exp.control(&exp.grid, &w).unwrap();
        assert_eq!(u.at(0, 3), 0);
        assert_eq!(u.at(0, 4), 1);
    }
}
