//! Configuration-driven experiment runner behind the `fbxlab` binary.
//!
//! Configs are flat `key = value` files with `[section]` headers. Every key
//! has a default in [`DEFAULTS`]; unknown sections, keys and names are
//! rejected before any computation starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde_json::{json, Value};

use crate::barriers::{certify, power_barrier, power_threshold, radial_barrier, radial_gamma, BarrierKind};
use crate::error::{Error, Result};
use crate::flatness::{taylor_expand_at_fb, FlatnessParams};
use crate::grid::{ball_mask, Grid, GridField, NodeKind};
use crate::hodograph::{
    bernoulli_residual, check_complementing, hodograph_forward, legendre_derivative_check, transform_operator,
    ChartParams, ComplementingInput, Verdict,
};
use crate::linalg::{dot, unit, SymMatrix};
use crate::oblique::{pointwise_expansion, solve_oblique, ObliqueProblem};
use crate::operators::{
    check_operator, compute_tau, pucci_suite, BoundaryLaw, OperatorSpec, Problem, Rhs,
};
use crate::perron::{perron_solve, verify_subsolution, verify_supersolution, PerronParams, VerifyReport};
use crate::sampling::{random_in_ball, random_unit, rng};
use crate::scheme::{DiscreteProblem, Scheme};

/// `(key, default, meaning)` for every accepted config key.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("run.experiment", "perron", "perron | flatness | oblique | hodograph | barriers | invariants"),
    ("run.dim", "2", "space dimension"),
    ("run.h", "0.03125", "grid spacing"),
    ("run.seed", "0", "seed for sampled checks; FBXLAB_SEED overrides"),
    ("run.out", "out", "output directory"),
    ("operator.name", "laplace", "laplace | pucci_minus | pucci_plus | bellman"),
    ("operator.lambda", "1", "lower ellipticity constant"),
    ("operator.Lambda", "1", "upper ellipticity constant"),
    ("rhs.kind", "constant", "constant | affine"),
    ("rhs.value", "0", "constant part of f"),
    ("rhs.coeffs", "", "gradient of an affine f, comma separated"),
    ("law.kind", "constant", "constant | affine_x | angular"),
    ("law.value", "1", "g at the origin"),
    ("law.coeffs", "", "x-gradient of an affine_x law"),
    ("law.eps", "0.1", "amplitude of the angular law"),
    ("law.axis", "0", "axis of the angular law"),
    ("datum.kind", "half_plane", "half_plane | quadratic | step | degenerate | zero"),
    ("datum.slope", "1", "normal slope of half_plane and quadratic data"),
    ("datum.curvature", "0", "second normal derivative of quadratic and degenerate data"),
    ("datum.angle", "0", "tilt of the datum normal from the last axis towards the first, radians"),
    ("datum.value", "0.5", "height of the step datum on {x_d > 0}"),
    ("minorant.kind", "none", "none | datum"),
    ("solver.scheme", "central", "central | wide"),
    ("solver.tol", "1e-8", "relative residual tolerance of grid solves"),
    ("solver.fb_tol_factor", "3", "free boundary verification tolerance in units of h"),
    ("solver.interior_tol", "1e-6", "interior residual tolerance of verification"),
    ("flatness.x0", "", "base point, comma separated; empty means the origin"),
    ("flatness.nu", "", "initial normal; empty means estimate it"),
    ("flatness.delta", "auto", "initial scale or auto"),
    ("flatness.rho", "0.25", "contraction factor"),
    ("flatness.alpha", "0.25", "target Hoelder exponent"),
    ("flatness.max_iters", "12", "iteration cap"),
    ("oblique.tau", "", "oblique vector with last entry 1; empty means e_d"),
    ("oblique.h", "0.015625", "half-ball grid spacing"),
    ("oblique.data", "affine", "affine | quadratic | smooth"),
    ("hodograph.x0", "", "patch center; empty means the origin"),
    ("hodograph.delta", "0.5", "patch radius"),
    ("hodograph.gamma0", "0.5", "nondegeneracy level of the patch"),
    ("hodograph.frequencies", "20", "random tangential frequencies for the complementing check"),
    ("barriers.samples", "10000", "annulus samples per barrier"),
    ("invariants.samples", "1000", "random matrices per dimension"),
    ("sweep.h", "", "comma separated grid spacings run as independent sub-runs"),
];

pub const EXPERIMENTS: [&str; 6] = ["perron", "flatness", "oblique", "hodograph", "barriers", "invariants"];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config { values: DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(format!("line {}: unterminated section header", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("line {}: expected key = value", lineno + 1)))?;
            if section.is_empty() {
                return Err(cfg_err(format!("line {}: key outside of a section", lineno + 1)));
            }
            cfg.set(&format!("{section}.{}", k.trim()), v.trim())
                .map_err(|e| cfg_err(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(cfg_err(format!("unknown key '{key}'"))),
        }
    }

    /// Applies a `section.key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| cfg_err(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("key {key} missing from DEFAULTS"))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v = self.get(key);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| cfg_err(format!("{key} = '{v}' is not a finite number")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key);
        v.parse().map_err(|_| cfg_err(format!("{key} = '{v}' is not a non-negative integer")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let v = self.get(key);
        parse_u64(v).ok_or_else(|| cfg_err(format!("{key} = '{v}' is not an unsigned integer")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| cfg_err(format!("{key} = '{v}' is not a comma separated list of numbers")))
    }

    /// The resolved config in the input format, one section per block.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (key, value) in &self.values {
            let (section, name) = key.split_once('.').expect("keys are section.name");
            if section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }
}

fn parse_u64(v: &str) -> Option<u64> {
    match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => v.parse().ok(),
    }
}

/// Table of keys, defaults and meanings as printed by `fbxlab run --help`.
pub fn defaults_table() -> String {
    let mut s = String::new();
    for (k, v, doc) in DEFAULTS {
        let _ = writeln!(s, "{k:<24} {:<10} {doc}", if v.is_empty() { "(empty)" } else { v });
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DatumKind {
    HalfPlane,
    Quadratic,
    Step,
    Degenerate,
    Zero,
}

/// Closed-form field used as boundary datum, sampled solution or patch.
#[derive(Clone, Debug)]
pub struct DatumSpec {
    pub kind: DatumKind,
    pub slope: f64,
    pub curvature: f64,
    pub angle: f64,
    pub value: f64,
}

impl DatumSpec {
    fn normal(&self, d: usize) -> Vec<f64> {
        let mut nu = vec![0.0; d];
        nu[d - 1] = self.angle.cos();
        if d > 1 {
            nu[0] = self.angle.sin();
        } else {
            nu[0] = 1.0;
        }
        nu
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let t = dot(x, &self.normal(x.len()));
        match self.kind {
            DatumKind::HalfPlane => (self.slope * t).max(0.0),
            DatumKind::Quadratic => {
                if t > 0.0 {
                    (self.slope * t + 0.5 * self.curvature * t * t).max(0.0)
                } else {
                    0.0
                }
            }
            DatumKind::Step => {
                if x[x.len() - 1] > 0.0 {
                    self.value
                } else {
                    0.0
                }
            }
            DatumKind::Degenerate => 0.5 * self.curvature * t * t,
            DatumKind::Zero => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObliqueData {
    Affine,
    Quadratic,
    Smooth,
}

/// A fully validated run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub experiment: String,
    pub dim: usize,
    pub h: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub problem: Problem,
    pub scheme: Scheme,
    pub datum: DatumSpec,
    pub minorant: bool,
    pub oblique_data: ObliqueData,
    pub sweep: Vec<f64>,
    pub config: Config,
}

impl RunConfig {
    pub fn from_config(config: Config) -> Result<RunConfig> {
        let experiment = config.get("run.experiment").to_string();
        if !EXPERIMENTS.contains(&experiment.as_str()) {
            return Err(cfg_err(format!("unknown experiment '{experiment}' (known: {})", EXPERIMENTS.join(", "))));
        }
        let dim = config.usize("run.dim")?;
        if !(1..=3).contains(&dim) {
            return Err(cfg_err(format!("run.dim must be 1, 2 or 3, got {dim}")));
        }
        let h = config.f64("run.h")?;
        if !(h > 0.0 && h <= 0.5) {
            return Err(cfg_err(format!("run.h must lie in (0, 0.5], got {h}")));
        }
        let lambda = config.f64("operator.lambda")?;
        let big = config.f64("operator.Lambda")?;
        let op = OperatorSpec::from_name(config.get("operator.name"), dim, lambda, big)
            .map_err(|e| match e {
                Error::Config(_) => e,
                other => cfg_err(other.to_string()),
            })?;
        let f = match config.get("rhs.kind") {
            "constant" => Rhs::constant(config.f64("rhs.value")?),
            "affine" => {
                let a = config.list("rhs.coeffs")?;
                if a.len() != dim {
                    return Err(cfg_err(format!("rhs.coeffs needs {dim} entries")));
                }
                Rhs::affine(config.f64("rhs.value")?, a)
            }
            other => return Err(cfg_err(format!("unknown rhs kind '{other}'"))),
        };
        let g0 = config.f64("law.value")?;
        let law = match config.get("law.kind") {
            "constant" => BoundaryLaw::constant(dim, g0),
            "affine_x" => {
                let a = config.list("law.coeffs")?;
                if a.len() != dim {
                    return Err(cfg_err(format!("law.coeffs needs {dim} entries")));
                }
                BoundaryLaw::affine_x(g0, a)
            }
            "angular" => BoundaryLaw::angular(dim, g0, config.f64("law.eps")?, config.usize("law.axis")?),
            other => return Err(cfg_err(format!("unknown law kind '{other}'"))),
        }
        .map_err(|e| cfg_err(e.to_string()))?;
        let problem = Problem::unit_ball(op, f, law).map_err(|e| cfg_err(e.to_string()))?;
        let scheme = match config.get("solver.scheme") {
            "central" => Scheme::CentralHessian,
            "wide" => Scheme::WideStencil,
            other => return Err(cfg_err(format!("unknown scheme '{other}'"))),
        };
        let kind = match config.get("datum.kind") {
            "half_plane" => DatumKind::HalfPlane,
            "quadratic" => DatumKind::Quadratic,
            "step" => DatumKind::Step,
            "degenerate" => DatumKind::Degenerate,
            "zero" => DatumKind::Zero,
            other => return Err(cfg_err(format!("unknown datum kind '{other}'"))),
        };
        let datum = DatumSpec {
            kind,
            slope: config.f64("datum.slope")?,
            curvature: config.f64("datum.curvature")?,
            angle: config.f64("datum.angle")?,
            value: config.f64("datum.value")?,
        };
        let minorant = match config.get("minorant.kind") {
            "none" => false,
            "datum" => true,
            other => return Err(cfg_err(format!("unknown minorant kind '{other}'"))),
        };
        let oblique_data = match config.get("oblique.data") {
            "affine" => ObliqueData::Affine,
            "quadratic" => ObliqueData::Quadratic,
            "smooth" => ObliqueData::Smooth,
            other => return Err(cfg_err(format!("unknown oblique data '{other}'"))),
        };
        for key in ["solver.tol", "solver.fb_tol_factor", "solver.interior_tol", "flatness.rho", "flatness.alpha",
            "oblique.h", "hodograph.delta", "hodograph.gamma0"]
        {
            config.f64(key)?;
        }
        for key in ["flatness.max_iters", "hodograph.frequencies", "barriers.samples", "invariants.samples"] {
            config.usize(key)?;
        }
        for key in ["flatness.x0", "flatness.nu", "oblique.tau", "hodograph.x0"] {
            let v = config.list(key)?;
            if !v.is_empty() && v.len() != dim {
                return Err(cfg_err(format!("{key} needs {dim} entries")));
            }
        }
        if config.get("flatness.delta") != "auto" {
            config.f64("flatness.delta")?;
        }
        let sweep = config.list("sweep.h")?;
        if sweep.iter().any(|&s| !(s > 0.0 && s <= 0.5)) {
            return Err(cfg_err("sweep.h entries must lie in (0, 0.5]"));
        }
        Ok(RunConfig {
            experiment,
            dim,
            h,
            seed: config.u64("run.seed")?,
            out: PathBuf::from(config.get("run.out")),
            problem,
            scheme,
            datum,
            minorant,
            oblique_data,
            sweep,
            config,
        })
    }

    fn discrete_problem(&self) -> Result<DiscreteProblem> {
        let mut dp = DiscreteProblem::new(self.problem.clone(), self.scheme);
        dp.tol = self.config.f64("solver.tol")?;
        Ok(dp)
    }

    fn point(&self, key: &str) -> Result<Vec<f64>> {
        let v = self.config.list(key)?;
        Ok(if v.is_empty() { vec![0.0; self.dim] } else { v })
    }

    fn sampled_datum(&self) -> Result<GridField> {
        let grid = Grid::centered_cube(self.dim, 1.0, self.h)?;
        let mask = ball_mask(&grid, &vec![0.0; self.dim], 1.0);
        GridField::from_fn(grid, mask, |x| self.datum.eval(x))
    }

    fn with_h(&self, h: f64, out: PathBuf) -> Result<RunConfig> {
        let mut config = self.config.clone();
        config.set("run.h", &h.to_string())?;
        config.set("run.out", &out.to_string_lossy())?;
        config.set("sweep.h", "")?;
        RunConfig::from_config(config)
    }
}

/// Builds a run from a config file, the `FBXLAB_SEED` value and `key=value`
/// overrides, applied in that order.
pub fn resolve(path: &Path, env_seed: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = Config::from_file(path)?;
    if let Some(seed) = env_seed {
        parse_u64(seed).ok_or_else(|| cfg_err(format!("FBXLAB_SEED = '{seed}' is not an unsigned integer")))?;
        cfg.set("run.seed", seed)?;
    }
    for pair in overrides {
        cfg.set_pair(pair)?;
    }
    RunConfig::from_config(cfg)
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    pub force: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { jobs: 1, force: false }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub results: Value,
    /// Failed run assertions, in the order they were checked.
    pub failures: Vec<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Exit status for a run that stopped with an error.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Nonconvergence { .. } => 3,
        _ => 1,
    }
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(cfg_err(format!("output directory {} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Executes the configured experiment and writes `results.json`,
/// `meta.json`, `config.ini` and the experiment's artifacts into the output
/// directory.
pub fn run(cfg: &RunConfig, opts: RunOptions) -> Result<RunOutcome> {
    let started = Instant::now();
    let dir = cfg.out.clone();
    prepare_dir(&dir, opts.force)?;
    fs::write(dir.join("config.ini"), cfg.config.to_ini())?;
    let outcome = if cfg.sweep.is_empty() {
        run_experiment(cfg, &dir)?
    } else {
        run_sweep(cfg, &dir, opts)?
    };
    let mut results = outcome.results.clone();
    results["failures"] = json!(outcome.failures);
    results["passed"] = json!(outcome.failures.is_empty());
    write_json(&dir.join("results.json"), &results)?;
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "finished_unix": unix,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "jobs": opts.jobs,
    });
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(RunOutcome { results, failures: outcome.failures })
}

fn run_sweep(cfg: &RunConfig, dir: &Path, opts: RunOptions) -> Result<RunOutcome> {
    let subs: Vec<RunConfig> = cfg
        .sweep
        .iter()
        .enumerate()
        .map(|(i, &h)| cfg.with_h(h, dir.join(format!("sweep_{i:03}"))))
        .collect::<Result<_>>()?;
    let slots: Vec<Mutex<Option<Result<RunOutcome>>>> = subs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.clamp(1, subs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= subs.len() {
                    break;
                }
                let r = prepare_dir(&subs[i].out, opts.force).and_then(|_| run_experiment(&subs[i], &subs[i].out));
                *slots[i].lock().expect("sweep slot") = Some(r);
            });
        }
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (sub, slot) in subs.iter().zip(slots) {
        let out = slot.into_inner().expect("sweep slot").expect("every sweep slot is filled")?;
        failures.extend(out.failures.iter().map(|f| format!("h = {}: {f}", sub.h)));
        let mut r = out.results;
        r["failures"] = json!(out.failures);
        write_json(&sub.out.join("results.json"), &r)?;
        runs.push(r);
    }
    Ok(RunOutcome { results: json!({ "experiment": cfg.experiment, "sweep": runs }), failures })
}

fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let (mut results, failures) = match cfg.experiment.as_str() {
        "perron" => run_perron(cfg, dir)?,
        "flatness" => run_flatness(cfg, dir)?,
        "oblique" => run_oblique(cfg, dir)?,
        "hodograph" => run_hodograph(cfg, dir)?,
        "barriers" => run_barriers(cfg, dir)?,
        "invariants" => run_invariants(cfg)?,
        other => return Err(cfg_err(format!("unknown experiment '{other}'"))),
    };
    results["experiment"] = json!(cfg.experiment);
    results["dim"] = json!(cfg.dim);
    results["h"] = json!(cfg.h);
    results["seed"] = json!(cfg.seed);
    Ok(RunOutcome { results, failures })
}

type Experiment = Result<(Value, Vec<String>)>;

fn verify_pair(u: &GridField, dp: &DiscreteProblem, cfg: &Config) -> Result<(VerifyReport, VerifyReport, Vec<String>)> {
    let fb_tol = cfg.f64("solver.fb_tol_factor")? * u.h();
    let itol = cfg.f64("solver.interior_tol")?;
    let sup = verify_supersolution(u, dp, fb_tol);
    let sub = verify_subsolution(u, dp, fb_tol);
    let mut failures = Vec::new();
    for r in [&sup, &sub] {
        if !r.passes(itol) {
            failures.push(format!(
                "{} check: interior violation {:.3e}, {} free boundary violations above {:.3e}",
                r.kind,
                r.interior_violation,
                r.fb_violations.len(),
                fb_tol
            ));
        }
    }
    Ok((sup, sub, failures))
}

fn run_perron(cfg: &RunConfig, dir: &Path) -> Experiment {
    let dp = cfg.discrete_problem()?;
    let minorant = if cfg.minorant {
        let mut m = GridField::unit_ball(cfg.dim, cfg.h)?;
        m.fill(|x| cfg.datum.eval(x));
        Some(m)
    } else {
        None
    };
    let out = perron_solve(&dp, cfg.h, |x| cfg.datum.eval(x), minorant.as_ref(), &PerronParams::default())?;
    out.field.export(&dir.join("field"))?;
    let d = cfg.dim;
    let mut csv = String::new();
    let axes = |p: &str| (0..d).map(|k| format!("{p}{k}")).collect::<Vec<_>>().join(",");
    let _ = writeln!(csv, "{},{},{},slope,g", axes("x"), axes("fb"), axes("n"));
    for n in &out.fb {
        let join = |v: &[f64]| v.iter().map(|c| format!("{c:.12e}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(csv, "{},{},{},{:.12e},{:.12e}", join(&n.x), join(&n.point), join(&n.normal), n.slope, n.g);
    }
    fs::write(dir.join("fb.csv"), csv)?;
    let (sup, sub, mut failures) = verify_pair(&out.field, &dp, &cfg.config)?;
    if !out.report.monotone {
        failures.push("perron stages are not monotone".into());
    }
    let fb_location = if d == 1 { out.fb.first().map(|n| n.point[0]) } else { None };
    let slopes: Vec<f64> = out.fb.iter().map(|n| n.slope).collect();
    let results = json!({
        "fb_nodes": out.fb.len(),
        "fb_location": fb_location,
        "fb_slope_min": slopes.iter().cloned().fold(f64::INFINITY, f64::min),
        "fb_slope_max": slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "max_value": out.field.max_abs(),
        "report": out.report,
        "verify_supersolution": summary(&sup),
        "verify_subsolution": summary(&sub),
    });
    Ok((results, failures))
}

fn summary(r: &VerifyReport) -> Value {
    json!({
        "interior_violation": r.interior_violation,
        "fb_nodes": r.fb_nodes,
        "max_fb_defect": r.max_fb_defect,
        "fb_tol": r.fb_tol,
        "fb_violations": r.fb_violations.len(),
    })
}

fn run_flatness(cfg: &RunConfig, dir: &Path) -> Experiment {
    let u = cfg.sampled_datum()?;
    let c = &cfg.config;
    let delta = match c.get("flatness.delta") {
        "auto" => None,
        _ => Some(c.f64("flatness.delta")?),
    };
    let params = FlatnessParams {
        rho: c.f64("flatness.rho")?,
        alpha: c.f64("flatness.alpha")?,
        delta,
        max_iters: c.usize("flatness.max_iters")?,
        seed: cfg.seed,
        ..FlatnessParams::default()
    };
    let x0 = cfg.point("flatness.x0")?;
    let nu = c.list("flatness.nu")?;
    let rep = taylor_expand_at_fb(&u, &x0, &cfg.problem, (!nu.is_empty()).then_some(nu.as_slice()), params)?;
    rep.trace.write_csv(&dir.join("trace.csv"))?;
    let mut prof = String::from("r,error\n");
    for (r, e) in &rep.profile {
        let _ = writeln!(prof, "{r:.12e},{e:.12e}");
    }
    fs::write(dir.join("profile.csv"), prof)?;
    let mut failures = Vec::new();
    for w in rep.trace.records.windows(2) {
        if !w[0].resolution_bound && !w[1].resolution_bound && w[1].eps > w[0].eps + 1e-9 {
            failures.push(format!("flatness increased at step {}: {:.3e} > {:.3e}", w[1].n, w[1].eps, w[0].eps));
            break;
        }
    }
    let results = json!({
        "x0": x0,
        "nu": rep.nu,
        "hessian": rep.p.m,
        "exponent": rep.exponent,
        "resolution_bound": rep.resolution_bound,
        "partial": rep.partial,
        "delta": rep.trace.delta,
        "halted": rep.trace.halted,
        "decay_exponent": rep.trace.decay_exponent(),
        "records": rep.trace.records.iter().map(|r| json!({
            "n": r.n, "r_n": r.r_n, "eps": r.eps, "nu": r.nu, "resolution_bound": r.resolution_bound,
        })).collect::<Vec<_>>(),
    });
    Ok((results, failures))
}

fn run_oblique(cfg: &RunConfig, dir: &Path) -> Experiment {
    let d = cfg.dim;
    if d < 2 {
        return Err(cfg_err("oblique runs need run.dim >= 2"));
    }
    let mut tau = cfg.config.list("oblique.tau")?;
    if tau.is_empty() {
        tau = unit(d, d - 1);
    }
    let h = cfg.config.f64("oblique.h")?;
    let prob = ObliqueProblem::new(cfg.problem.op.clone(), tau.clone(), h)?;
    let t1 = tau[0];
    let exact: Option<Box<dyn Fn(&[f64]) -> f64 + Sync>> = match cfg.oblique_data {
        ObliqueData::Affine => Some(Box::new(move |x: &[f64]| 1.0 + x[0] - t1 * x[x.len() - 1])),
        ObliqueData::Quadratic => {
            if !matches!(cfg.problem.op.name.as_str(), "laplace") || tau.iter().take(d - 1).any(|&t| t != 0.0) {
                return Err(cfg_err("oblique.data = quadratic needs the laplace operator and tau = e_d"));
            }
            Some(Box::new(|x: &[f64]| x[x.len() - 1].powi(2) - x[0] * x[0]))
        }
        ObliqueData::Smooth => None,
    };
    let smooth = |x: &[f64]| x[0] * x[x.len() - 1] + 0.5 * x[x.len() - 1].powi(2) + 0.2 * x[0].powi(3);
    let (field, stats) = match &exact {
        Some(f) => solve_oblique(&prob, f)?,
        None => solve_oblique(&prob, smooth)?,
    };
    field.export(&dir.join("field"))?;
    let exp = pointwise_expansion(&field)?;
    let mut prof = String::from("rho,residual\n");
    for (r, e) in &exp.profile {
        let _ = writeln!(prof, "{r:.12e},{e:.12e}");
    }
    fs::write(dir.join("profile.csv"), prof)?;
    let mut failures = Vec::new();
    let error = exact.as_ref().map(|f| field.sup_error(f));
    if let Some(err) = error {
        let bound = 4.0 * h * h + prob.tol * field.max_abs().max(1.0);
        if err > bound {
            failures.push(format!("exact solution error {err:.3e} exceeds {bound:.3e}"));
        }
    }
    if let Some(e) = exp.exponent {
        if e < 1.9 {
            failures.push(format!("expansion residual exponent {e:.3} below 1.9"));
        }
    }
    let results = json!({
        "tau": tau,
        "oblique_h": h,
        "sweeps": stats.sweeps,
        "residual": stats.residual,
        "exact_error": error,
        "expansion": exp,
    });
    Ok((results, failures))
}

/// Central-difference `∇_ξ G` at `(x, ξ)`.
fn bernoulli_gradient(law: &BoundaryLaw, x: &[f64], xi: &[f64]) -> Result<Vec<f64>> {
    let step = 1e-6;
    (0..xi.len())
        .map(|k| {
            let mut p = xi.to_vec();
            let mut q = xi.to_vec();
            p[k] += step;
            q[k] -= step;
            Ok((bernoulli_residual(law, x, &p)? - bernoulli_residual(law, x, &q)?) / (2.0 * step))
        })
        .collect()
}

/// Symmetric difference quotient of `F` in `M` at `(0, ξ, x)`.
fn operator_coefficients(op: &OperatorSpec, xi: &[f64], x: &[f64]) -> SymMatrix {
    let d = op.dim;
    let step = 1e-6;
    let mut a = SymMatrix::zeros(d);
    for i in 0..d {
        for j in i..d {
            let mut e = SymMatrix::zeros(d);
            e.set(i, j, step);
            let v = (op.eval(&e, xi, x) - op.eval(&e.scale(-1.0), xi, x)) / (2.0 * step);
            a.set(i, j, if i == j { v } else { 0.5 * v });
        }
    }
    a
}

fn run_hodograph(cfg: &RunConfig, dir: &Path) -> Experiment {
    let d = cfg.dim;
    let c = &cfg.config;
    let u = cfg.sampled_datum()?;
    let x0 = cfg.point("hodograph.x0")?;
    let params = ChartParams::new(c.f64("hodograph.delta")?, c.f64("hodograph.gamma0")?);
    let chart = hodograph_forward(&u, &x0, params)?;
    chart.w.export(&dir.join("chart"))?;
    let ids = legendre_derivative_check(&chart, &u)?;
    let top = transform_operator(&cfg.problem, &chart)?;
    let tr = top.chart_residual(&chart)?;
    let ell = top.ellipticity_probe(&chart, 200, cfg.seed)?;
    let h = cfg.h;
    let mut failures = Vec::new();
    if chart.round_trip > 5.0 * h {
        failures.push(format!("chart round trip {:.3e} exceeds 5h", chart.round_trip));
    }
    if ids.max() > 10.0 * h {
        failures.push(format!("derivative identity residual {:.3e} exceeds 10h", ids.max()));
    }
    if tr.sup_residual > 1e-3 {
        failures.push(format!("transformed operator residual {:.3e} exceeds 1e-3", tr.sup_residual));
    }
    if ell.max_violation > 1e-9 {
        failures.push(format!("transformed operator increases along a positive direction by {:.3e}", ell.max_violation));
    }
    let mut records = Vec::new();
    if d >= 2 {
        let law = &cfg.problem.law;
        let en = unit(d, d - 1);
        let xi = crate::linalg::scaled(&en, law.g(&x0, &en));
        let input_a = operator_coefficients(&cfg.problem.op, &xi, &x0);
        let b = bernoulli_gradient(law, &x0, &xi)?;
        let mut r = rng(cfg.seed);
        for _ in 0..c.usize("hodograph.frequencies")? {
            let scale = r.gen_range(0.1..10.0);
            let xp: Vec<f64> = random_unit(&mut r, d - 1).iter().map(|v| v * scale).collect();
            let rec = check_complementing(&ComplementingInput { a: input_a.clone(), b: b.clone(), xi_prime: xp })?;
            if rec.verdict != Verdict::Satisfied && failures.iter().all(|f| !f.starts_with("complementing")) {
                failures.push(format!("complementing condition fails: {:?}", rec.verdict));
            }
            records.push(serde_json::to_value(&rec)?);
        }
        write_json(&dir.join("complementing.json"), &Value::Array(records.clone()))?;
    }
    let results = json!({
        "x0": x0,
        "round_trip": chart.round_trip,
        "fb_residual": chart.fb_residual,
        "tilt_deg": chart.tilt_deg,
        "gamma_min": chart.gamma_min,
        "lipschitz": chart.lipschitz,
        "identities": ids,
        "transform": tr,
        "ellipticity": ell,
        "complementing_checked": records.len(),
    });
    Ok((results, failures))
}

fn barrier_margins(dim: usize, lambda: f64, big: f64, samples: usize, seed: u64) -> Result<Vec<(String, f64, Option<f64>)>> {
    let center = vec![0.0; dim];
    let minus = OperatorSpec::pucci_minus(dim, lambda, big)?;
    let plus = OperatorSpec::pucci_plus(dim, lambda, big)?;
    let gamma = radial_gamma(&minus, 1.0);
    let pgamma = power_threshold(dim, lambda, big) + 1.0;
    let margin = |r: Result<f64>| -> Result<Option<f64>> {
        match r {
            Ok(s) => Ok(Some(s)),
            Err(Error::BarrierFailure { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    Ok(vec![
        (
            "radial_sub".into(),
            gamma,
            margin(radial_barrier(BarrierKind::RadialSub, &center, 1.0, 1.0, gamma, &minus, samples, seed).map(|p| p.1))?,
        ),
        (
            "radial_super".into(),
            gamma,
            margin(radial_barrier(BarrierKind::RadialSuper, &center, 1.0, 1.0, gamma, &plus, samples, seed).map(|p| p.1))?,
        ),
        (
            "power".into(),
            pgamma,
            margin(power_barrier(&center, 0.5, pgamma, lambda, big).and_then(|s| certify(&s, &minus, samples, seed)))?,
        ),
    ])
}

fn run_barriers(cfg: &RunConfig, dir: &Path) -> Experiment {
    let op = &cfg.problem.op;
    let samples = cfg.config.usize("barriers.samples")?;
    let rows = barrier_margins(cfg.dim, op.lambda, op.big_lambda, samples, cfg.seed)?;
    let mut csv = String::from("kind,gamma,margin,certified\n");
    let mut failures = Vec::new();
    let mut out = Vec::new();
    for (kind, gamma, m) in &rows {
        let _ = writeln!(csv, "{kind},{gamma:.12e},{:.12e},{}", m.unwrap_or(f64::NAN), m.is_some());
        if m.is_none() {
            failures.push(format!("{kind} barrier has no positive margin"));
        }
        out.push(json!({ "kind": kind, "gamma": gamma, "margin": m }));
    }
    fs::write(dir.join("barriers.csv"), csv)?;
    Ok((json!({ "lambda": op.lambda, "Lambda": op.big_lambda, "samples": samples, "barriers": out }), failures))
}

/// Worst `|τ·ν − 1|` over random points and normals.
fn tau_suite(law: &BoundaryLaw, samples: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let d = law.dim;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = random_in_ball(&mut r, &vec![0.0; d], 1.0);
        let nu = random_unit(&mut r, d);
        let tau = compute_tau(law, &nu, &x)?;
        worst = worst.max((dot(&tau, &nu) - 1.0).abs());
    }
    Ok(worst)
}

fn run_invariants(cfg: &RunConfig) -> Experiment {
    let op = &cfg.problem.op;
    let samples = cfg.config.usize("invariants.samples")?;
    let (lambda, big) = (op.lambda, op.big_lambda);
    let mut failures = Vec::new();
    let pucci = pucci_suite(&[2, 3], lambda, big, samples, cfg.seed, 1e-10)?;
    if !pucci.passed {
        failures.push(format!("Pucci suite: {pucci:?}"));
    }
    let sandwich = check_operator(op, samples, cfg.seed);
    if !sandwich.passed {
        failures.push(format!("operator {} fails the sandwich checks: {sandwich:?}", op.name));
    }
    let mut tau = Vec::new();
    for law in [&cfg.problem.law, &BoundaryLaw::angular(cfg.dim, 1.0, 0.2, 0)?] {
        let worst = tau_suite(law, samples, cfg.seed)?;
        if worst > 1e-12 {
            failures.push(format!("tau of law {} has |tau.nu - 1| = {worst:.3e}", law.name));
        }
        tau.push(json!({ "law": law.name, "max_defect": worst }));
    }
    let mut barriers = Vec::new();
    for d in [2, 3] {
        for (kind, gamma, m) in barrier_margins(d, lambda, big, samples.max(1000), cfg.seed)? {
            if m.is_none() {
                failures.push(format!("{kind} barrier (d = {d}) has no positive margin"));
            }
            barriers.push(json!({ "dim": d, "kind": kind, "gamma": gamma, "margin": m }));
        }
    }
    let lb = cfg.problem.law.check_lower_bound(samples, cfg.seed);
    if !lb.1 {
        failures.push(format!("law {} drops below its declared lower bound ({:.3e})", cfg.problem.law.name, lb.0));
    }
    let results = json!({
        "pucci": pucci,
        "operator": sandwich,
        "tau": tau,
        "barriers": barriers,
        "law_lower_bound": lb.0,
    });
    Ok((results, failures))
}

/// Runs the invariant suites for (λ,Λ) ∈ {(1,1), (1,2)} and every built-in
/// operator without writing files. Returns one line per suite and the
/// failures.
pub fn selftest(seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (lambda, big) in [(1.0, 1.0), (1.0, 2.0)] {
        for name in crate::operators::OPERATOR_NAMES {
            let mut c = Config::default();
            c.set("run.experiment", "invariants")?;
            c.set("operator.name", name)?;
            c.set("operator.lambda", &lambda.to_string())?;
            c.set("operator.Lambda", &big.to_string())?;
            c.set("run.seed", &seed.to_string())?;
            let cfg = RunConfig::from_config(c)?;
            let (_, f) = run_invariants(&cfg)?;
            let tag = if f.is_empty() { "ok" } else { "FAILED" };
            lines.push(format!("invariants {name} lambda={lambda} Lambda={big}: {tag}"));
            failures.extend(f.into_iter().map(|m| format!("{name} ({lambda}, {big}): {m}")));
        }
    }
    Ok((lines, failures))
}

/// `fbxlab verify`: checks a stored field against the config's problem.
pub fn verify_field(field_path: &Path, cfg: &RunConfig) -> Result<RunOutcome> {
    let u = GridField::read_fbxf(field_path)?;
    if u.dim() != cfg.dim {
        return Err(Error::GridMismatch(format!("field has dimension {}, config {}", u.dim(), cfg.dim)));
    }
    if u.mask.iter().all(|&k| k == NodeKind::Exterior) {
        return Err(Error::InvalidInput("field has no active nodes".into()));
    }
    let dp = cfg.discrete_problem()?;
    let (sup, sub, failures) = verify_pair(&u, &dp, &cfg.config)?;
    let results = json!({
        "field": field_path.display().to_string(),
        "h": u.h(),
        "verify_supersolution": summary(&sup),
        "verify_subsolution": summary(&sub),
        "lipschitz": crate::perron::lipschitz_norm(&u, 0.5),
        "max_value": u.max_abs(),
    });
    Ok(RunOutcome { results, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_overrides() {
        let c = Config::parse("[run]\nexperiment = oblique # comment\ndim=3\n\n[operator]\nname = bellman\nLambda = 2\n").unwrap();
        assert_eq!(c.get("run.experiment"), "oblique");
        assert_eq!(c.usize("run.dim").unwrap(), 3);
        assert_eq!(c.get("operator.Lambda"), "2");
        assert_eq!(c.get("run.h"), "0.03125");
        let mut c2 = c.clone();
        c2.set_pair("run.dim = 2").unwrap();
        assert_eq!(c2.get("run.dim"), "2");
    }

    #[test]
    fn unknown_names_are_config_errors() {
        assert!(matches!(Config::parse("[run]\nexperimnt = perron\n"), Err(Error::Config(_))));
        assert!(matches!(Config::parse("experiment = perron\n"), Err(Error::Config(_))));
        let c = Config::parse("[operator]\nname = laplacee\n").unwrap();
        let e = RunConfig::from_config(c).unwrap_err();
        assert_eq!(exit_code_for(&e), 2);
        let c = Config::parse("[datum]\nkind = wedge\n").unwrap();
        assert!(matches!(RunConfig::from_config(c), Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = Config::parse("[run]\nseed = 0x5EED\n[oblique]\ntau = 0.3, 1\n").unwrap();
        let again = Config::parse(&c.to_ini()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.u64("run.seed").unwrap(), 0x5EED);
        assert_eq!(again.list("oblique.tau").unwrap(), vec![0.3, 1.0]);
    }

    #[test]
    fn defaults_cover_every_key_once() {
        let mut keys: Vec<&str> = DEFAULTS.iter().map(|(k, _, _)| *k).collect();
        let n = keys.len();
        keys.dedup();
        assert_eq!(keys.len(), n);
        assert!(defaults_table().lines().count() == n);
        RunConfig::from_config(Config::default()).unwrap();
    }

    #[test]
    fn datum_shapes() {
        let q = DatumSpec { kind: DatumKind::Quadratic, slope: 1.0, curvature: 1.0, angle: 0.0, value: 0.0 };
        assert!((q.eval(&[0.3, 0.5]) - 0.625).abs() < 1e-15);
        assert_eq!(q.eval(&[0.3, -0.5]), 0.0);
        let s = DatumSpec { kind: DatumKind::Step, value: 0.5, ..q.clone() };
        assert_eq!(s.eval(&[1.0]), 0.5);
        assert_eq!(s.eval(&[-1.0]), 0.0);
    }

    #[test]
    fn nonempty_output_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep"), "x").unwrap();
        assert!(matches!(prepare_dir(dir.path(), false), Err(Error::Config(_))));
        prepare_dir(dir.path(), true).unwrap();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 2);
        let e = Error::Nonconvergence { stage: "s".into(), sweeps: 1, residual: 1.0, history: vec![] };
        assert_eq!(exit_code_for(&e), 3);
        assert_eq!(exit_code_for(&Error::Precondition("x".into())), 1);
    }
}
