//! Experiment plumbing: TOML configuration, per-method presets, the cached
//! reference solution, per-run and averaged CSV output, and the
//! epochs-to-tolerance summary table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{adagrad_run, proxsvrg_run, AdagradConfig, ProxSvrgConfig};
use crate::datakit::{load_libsvm_with, scale_features, synth_binary, LoadOptions, ScaleMode, SparseDataset, SynthSpec};
use crate::driver::{s2nd_run, s4n_run_from, S4NConfig};
use crate::error::{Error, Result};
use crate::model::{CompositeProblem, LossKind, SmoothLoss, DEFAULT_REG_WEIGHT};
use crate::newton::NewtonConfig;
use crate::oracles::{OracleConfig, OracleState};
use crate::trace::{write_records, Trace, TraceRecord};

/// A method name as used in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Sub-sampled gradient and Hessian; the gradient batch grows up to the
    /// given percentage of the data.
    S4nHg(u8),
    /// Full gradient, sub-sampled Hessian.
    S4nH,
    /// Variance-reduced gradient, sub-sampled Hessian.
    S4nVr,
    /// Exact gradient and Hessian.
    S2nD,
    Adagrad,
    ProxSvrg,
}

impl Method {
    pub fn is_stochastic(self) -> bool {
        self != Method::S2nD
    }

    pub fn all() -> Vec<Method> {
        vec![
            Method::S4nHg(10),
            Method::S4nHg(50),
            Method::S4nHg(100),
            Method::S4nH,
            Method::S4nVr,
            Method::S2nD,
            Method::Adagrad,
            Method::ProxSvrg,
        ]
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::S4nHg(c) => write!(f, "s4n-hg{c}"),
            Method::S4nH => f.write_str("s4n-h"),
            Method::S4nVr => f.write_str("s4n-vr"),
            Method::S2nD => f.write_str("s2n-d"),
            Method::Adagrad => f.write_str("adagrad"),
            Method::ProxSvrg => f.write_str("prox-svrg"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s {
            "s4n-h" => Method::S4nH,
            "s4n-vr" => Method::S4nVr,
            "s2n-d" => Method::S2nD,
            "adagrad" => Method::Adagrad,
            "prox-svrg" => Method::ProxSvrg,
            _ => match s.strip_prefix("s4n-hg").and_then(|c| c.parse::<u8>().ok()) {
                Some(c) if (1..=100).contains(&c) => Method::S4nHg(c),
                _ => return Err(Error::Config(format!("unknown method `{s}`"))),
            },
        };
        Ok(m)
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Fully resolved settings of one method.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSetup {
    S4n {
        s4n: S4NConfig,
        newton: NewtonConfig,
        oracle: OracleConfig,
    },
    Adagrad(AdagradConfig),
    ProxSvrg(ProxSvrgConfig),
}

fn frac(n: usize, f: f64) -> usize {
    ((n as f64 * f).floor() as usize).max(1)
}

/// Newton regularization coefficient used with sub-sampled Hessians.
///
/// A batch smaller than the dimension gives a singular Hessian sample, and the
/// default coefficient then leaves the null-space part of a noisy residual
/// almost undamped.
pub const SUBSAMPLED_REG_COEFF: f64 = 3.0;

/// Settings used for each method in the reported experiments.
pub fn method_preset(method: Method, loss: LossKind, n: usize) -> MethodSetup {
    let sigmoid = loss == LossKind::Sigmoid;
    let s4n = if sigmoid {
        S4NConfig::default().with_c_nu(2500.0)
    } else {
        S4NConfig::default()
    };
    let newton = if sigmoid {
        NewtonConfig::minres()
    } else {
        NewtonConfig::default()
    };
    let s0 = if sigmoid { frac(n, 0.05) } else { frac(n, 0.01) };
    let t0 = match (sigmoid, method) {
        (true, Method::S4nHg(10) | Method::S4nHg(50) | Method::S4nVr) => frac(n, 0.025),
        (true, _) => frac(n, 0.05),
        (false, _) => frac(n, 0.01),
    };
    let t_max = match (sigmoid, method) {
        (true, Method::S4nHg(10)) => frac(n, 0.05),
        (true, _) => frac(n, 0.25),
        (false, Method::S4nHg(10)) => frac(n, 0.01),
        (false, _) => frac(n, 0.1),
    };
    let base = OracleConfig {
        grad_size0: s0,
        grad_cap: s0,
        hess_size0: t0,
        hess_cap: t_max.max(t0),
        ..OracleConfig::default()
    };
    let s4n_setup = |oracle| MethodSetup::S4n {
        s4n: s4n.clone(),
        newton: NewtonConfig {
            reg_coeff: SUBSAMPLED_REG_COEFF,
            ..newton
        },
        oracle,
    };
    match method {
        Method::S4nHg(c) => s4n_setup(OracleConfig {
            grad_cap: frac(n, c as f64 / 100.0).max(s0),
            ..base
        }),
        Method::S4nH => s4n_setup(OracleConfig {
            grad_size0: n,
            grad_cap: n,
            full_gradient: true,
            ..base
        }),
        Method::S4nVr => s4n_setup(OracleConfig {
            vr_period: Some(if sigmoid { 8 } else { 6 }),
            ..base
        }),
        Method::S2nD => MethodSetup::S4n {
            s4n,
            newton,
            oracle: OracleConfig {
                grad_size0: n,
                grad_cap: n,
                hess_size0: n,
                hess_cap: n,
                ..OracleConfig::deterministic()
            },
        },
        Method::Adagrad => MethodSetup::Adagrad(AdagradConfig::for_points(n)),
        Method::ProxSvrg => MethodSetup::ProxSvrg(ProxSvrgConfig::for_points(n)),
    }
}

/// Stopping rules shared by all methods of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budget {
    pub max_iters: usize,
    pub max_epochs: f64,
    /// Stop once the tracked error drops below this value.
    pub target: f64,
    pub check_every: usize,
    pub timing: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            max_epochs: 50.0,
            target: 1e-10,
            check_every: 1,
            timing: true,
        }
    }
}

impl MethodSetup {
    /// Installs the budget; `psi_target` is set for convex problems.
    pub fn with_budget(mut self, b: &Budget, measure: Measure) -> Self {
        let (stop_tol, psi_target) = match measure {
            Measure::RelativeError { psi_star } => (-1.0, Some(psi_star + b.target * psi_star.abs().max(1.0))),
            Measure::Residual => (b.target, None),
        };
        match &mut self {
            MethodSetup::S4n { s4n, .. } => {
                s4n.max_iters = b.max_iters;
                s4n.max_epochs = b.max_epochs;
                s4n.stop_tol = stop_tol;
                s4n.psi_target = psi_target;
                s4n.check_every = b.check_every;
                s4n.timing = b.timing;
            }
            MethodSetup::Adagrad(c) => {
                c.max_iters = b.max_iters;
                c.max_epochs = b.max_epochs;
                c.stop_tol = stop_tol;
                c.psi_target = psi_target;
                c.check_every = b.check_every;
                c.timing = b.timing;
            }
            MethodSetup::ProxSvrg(c) => {
                c.max_iters = b.max_iters;
                c.max_epochs = b.max_epochs;
                c.stop_tol = stop_tol;
                c.psi_target = psi_target;
                c.check_every = b.check_every;
                c.timing = b.timing;
            }
        }
        self
    }

    /// Applies an override table with optional `s4n`, `newton`, `oracle`,
    /// `adagrad` and `prox_svrg` sub-tables.
    pub fn with_overrides(self, table: &toml::Table) -> Result<Self> {
        let allowed: &[&str] = match &self {
            MethodSetup::S4n { .. } => &["s4n", "newton", "oracle"],
            MethodSetup::Adagrad(_) => &["adagrad"],
            MethodSetup::ProxSvrg(_) => &["prox_svrg"],
        };
        if let Some(k) = table.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!("override section `{k}` does not apply here")));
        }
        let sub = |k: &str| table.get(k).and_then(|v| v.as_table());
        Ok(match self {
            MethodSetup::S4n { s4n, newton, oracle } => MethodSetup::S4n {
                s4n: patch(&s4n, sub("s4n"))?,
                newton: patch(&newton, sub("newton"))?,
                oracle: patch(&oracle, sub("oracle"))?,
            },
            MethodSetup::Adagrad(c) => MethodSetup::Adagrad(patch(&c, sub("adagrad"))?),
            MethodSetup::ProxSvrg(c) => MethodSetup::ProxSvrg(patch(&c, sub("prox_svrg"))?),
        })
    }

    /// Runs from `x = 0` with the given seed.
    pub fn run(&self, p: &CompositeProblem, method: Method, seed: u64) -> Result<Trace> {
        let mut trace = match self {
            MethodSetup::S4n { s4n, newton, oracle } => {
                if method == Method::S2nD {
                    s2nd_run(p, s4n, newton)?
                } else {
                    let oracle = OracleState::new(OracleConfig { seed, ..oracle.clone() }, p.n_points())?;
                    s4n_run_from(p, oracle, s4n, newton, vec![0.0; p.dim()], "s4n")?
                }
            }
            MethodSetup::Adagrad(c) => adagrad_run(p, &AdagradConfig { seed, ..c.clone() })?,
            MethodSetup::ProxSvrg(c) => proxsvrg_run(p, &ProxSvrgConfig { seed, ..c.clone() })?,
        };
        trace.summary.method = method.to_string();
        Ok(trace)
    }
}

fn patch<T: Serialize + DeserializeOwned>(base: &T, over: Option<&toml::Table>) -> Result<T> {
    let Some(over) = over else {
        return toml::from_str(&toml::to_string(base).map_err(cfg_err)?).map_err(cfg_err);
    };
    let mut value = toml::Value::try_from(base).map_err(cfg_err)?;
    let table = value
        .as_table_mut()
        .ok_or_else(|| Error::Config("settings must serialize to a table".into()))?;
    for (k, v) in over {
        if !table.contains_key(k) && !is_optional_key(k) {
            return Err(Error::Config(format!("unknown setting `{k}`")));
        }
        table.insert(k.clone(), v.clone());
    }
    value.try_into().map_err(cfg_err)
}

/// Keys whose default is `None` and hence absent from a serialized table.
fn is_optional_key(k: &str) -> bool {
    matches!(k, "theta0" | "psi_target" | "vr_period")
}

fn cfg_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synth(SynthSpec),
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        scale: Option<ScaleMode>,
        #[serde(default)]
        max_points: Option<usize>,
        #[serde(default)]
        n_features: Option<usize>,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<SparseDataset> {
        match self {
            DatasetSource::Synth(spec) => synth_binary(spec),
            DatasetSource::Libsvm {
                path,
                scale,
                max_points,
                n_features,
            } => {
                let ds = load_libsvm_with(
                    path,
                    &LoadOptions {
                        n_features: *n_features,
                        max_points: *max_points,
                        ..LoadOptions::default()
                    },
                )?;
                Ok(match scale {
                    Some(mode) => scale_features(&ds, *mode),
                    None => ds,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub loss: LossKind,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    DEFAULT_REG_WEIGHT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferencePolicy {
    /// Cache file; defaults to `reference.json` in the output directory.
    pub cache: Option<PathBuf>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ReferencePolicy {
    fn default() -> Self {
        Self {
            cache: None,
            tol: 1e-12,
            max_iters: 1000,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..50).collect()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub problem: ProblemSpec,
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub reference: ReferencePolicy,
    /// Run independent (method, seed) pairs concurrently.
    #[serde(default)]
    pub parallel: bool,
    /// Keyed by method name.
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Table>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(cfg_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.seeds.is_empty() && self.methods.iter().any(|m| m.is_stochastic()) {
            return Err(Error::Config("stochastic methods need at least one seed".into()));
        }
        for k in self.overrides.keys() {
            let m: Method = k.parse()?;
            if !self.methods.contains(&m) {
                return Err(Error::Config(format!("override for unused method `{k}`")));
            }
        }
        if !(self.problem.mu >= 0.0) {
            return Err(Error::Config("mu must be nonnegative".into()));
        }
        Ok(())
    }

    /// Preset, overrides and budget for one method.
    pub fn setup(&self, method: Method, n_points: usize, measure: Measure) -> Result<MethodSetup> {
        let mut s = method_preset(method, self.problem.loss, n_points);
        if let Some(t) = self.overrides.get(&method.to_string()) {
            s = s.with_overrides(t)?;
        }
        Ok(s.with_budget(&self.budget, measure))
    }
}

/// The error quantity tracked along a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Measure {
    /// `(psi(x) - psi*) / max(1, |psi*|)`
    RelativeError { psi_star: f64 },
    /// `||F^I(x)||`, available on checked iterations only.
    Residual,
}

impl Measure {
    pub fn of(&self, r: &TraceRecord) -> Option<f64> {
        match *self {
            Measure::RelativeError { psi_star } => Some(relative_error(r.psi, psi_star)),
            Measure::Residual => r.full_res,
        }
    }
}

pub fn relative_error(psi: f64, psi_star: f64) -> f64 {
    (psi - psi_star) / psi_star.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub key: String,
    pub psi: f64,
    pub full_res: f64,
    pub iterations: usize,
    pub x: Vec<f64>,
}

pub fn reference_key(ds: &SparseDataset, loss: LossKind, mu: f64) -> String {
    let loss = match loss {
        LossKind::Logistic => "logistic",
        LossKind::Sigmoid => "sigmoid",
    };
    format!("{}:{loss}:{mu:?}", ds.content_hash())
}

/// Solves with exact derivatives to `policy.tol`, reusing a cached solution
/// with the same key when one exists.
pub fn reference_solution(p: &CompositeProblem, policy: &ReferencePolicy, cache: Option<&Path>) -> Result<Reference> {
    let key = reference_key(&p.dataset, p.loss, p.reg_weight);
    let mut entries: BTreeMap<String, Reference> = match cache {
        Some(path) if path.exists() => {
            let text = fs::read_to_string(path).map_err(|source| Error::File {
                path: path.to_path_buf(),
                source,
            })?;
            serde_json::from_str(&text)?
        }
        _ => BTreeMap::new(),
    };
    if let Some(r) = entries.get(&key) {
        return Ok(r.clone());
    }
    let cfg = S4NConfig {
        stop_tol: policy.tol,
        max_iters: policy.max_iters,
        timing: false,
        ..S4NConfig::default()
    };
    let ncfg = if p.loss == LossKind::Sigmoid {
        NewtonConfig::minres()
    } else {
        NewtonConfig::default()
    };
    let t = s2nd_run(p, &cfg, &ncfg)?;
    let r = Reference {
        key: key.clone(),
        psi: t.summary.final_psi,
        full_res: t.summary.final_full_res.unwrap_or(f64::NAN),
        iterations: t.summary.iterations,
        x: t.x,
    };
    if let Some(path) = cache {
        entries.insert(key, r.clone());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(&entries)?)?;
    }
    Ok(r)
}

/// First `(epochs, wall_ms)` at which the measure is at most `tol`.
pub fn first_passage(records: &[TraceRecord], measure: Measure, tol: f64) -> Option<(f64, f64)> {
    records
        .iter()
        .find(|r| matches!(measure.of(r), Some(v) if v <= tol))
        .map(|r| (r.epochs, r.wall_ms))
}

/// Median with unreached runs counted as `+inf`; `None` when the median is
/// unreached.
pub fn median_reached(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let m = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    m.is_finite().then_some(m)
}

pub fn tolerance_grid() -> Vec<f64> {
    (2..=10).map(|e| 10f64.powi(-e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub tol: f64,
    pub runs: usize,
    pub reached: usize,
    pub median_epochs: Option<f64>,
    pub median_wall_ms: Option<f64>,
    /// Median of the last available measure value.
    pub median_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub trace: Trace,
}

fn final_value(records: &[TraceRecord], measure: Measure) -> f64 {
    records.iter().rev().find_map(|r| measure.of(r)).unwrap_or(f64::NAN)
}

/// Per method and tolerance: how many runs reach it and the median epochs and
/// wall time to get there.
pub fn compare_summary(runs: &[RunResult], measure: Measure, tols: &[f64]) -> Vec<SummaryRow> {
    let mut methods: Vec<Method> = runs.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut rows = Vec::new();
    for m in methods {
        let group: Vec<&RunResult> = runs.iter().filter(|r| r.method == m).collect();
        let mut finals: Vec<Option<f64>> = group.iter().map(|r| Some(final_value(&r.trace.records, measure))).collect();
        finals.retain(|v| matches!(v, Some(x) if !x.is_nan()));
        let median_final = median_reached(&finals).unwrap_or(f64::NAN);
        for &tol in tols {
            let hits: Vec<Option<(f64, f64)>> = group
                .iter()
                .map(|r| first_passage(&r.trace.records, measure, tol))
                .collect();
            rows.push(SummaryRow {
                method: m.to_string(),
                tol,
                runs: group.len(),
                reached: hits.iter().filter(|h| h.is_some()).count(),
                median_epochs: median_reached(&hits.iter().map(|h| h.map(|v| v.0)).collect::<Vec<_>>()),
                median_wall_ms: median_reached(&hits.iter().map(|h| h.map(|v| v.1)).collect::<Vec<_>>()),
                median_final,
            });
        }
    }
    rows
}

pub const UNREACHED: &str = "unreached";

pub fn write_summary<W: std::io::Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "method",
        "tol",
        "runs",
        "reached",
        "median_epochs",
        "median_wall_ms",
        "median_final",
    ])?;
    let opt = |v: Option<f64>| v.map_or_else(|| UNREACHED.to_string(), |x| x.to_string());
    for r in rows {
        wtr.write_record([
            r.method.clone(),
            r.tol.to_string(),
            r.runs.to_string(),
            r.reached.to_string(),
            opt(r.median_epochs),
            opt(r.median_wall_ms),
            r.median_final.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row of a method's averaged curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub epochs: f64,
    pub wall_ms: f64,
    pub error: f64,
}

/// Iteration-wise means over runs; runs that stopped early contribute their
/// final state, and missing measure values are carried forward.
pub fn mean_curve(runs: &[&RunResult], measure: Measure) -> Vec<CurvePoint> {
    let len = runs.iter().map(|r| r.trace.records.len()).max().unwrap_or(0);
    let filled: Vec<Vec<(f64, f64, f64)>> = runs
        .iter()
        .map(|r| {
            let mut last = f64::NAN;
            let mut out: Vec<(f64, f64, f64)> = r
                .trace
                .records
                .iter()
                .map(|rec| {
                    if let Some(v) = measure.of(rec) {
                        last = v;
                    }
                    (rec.epochs, rec.wall_ms, last)
                })
                .collect();
            let tail = *out.last().expect("traces hold the initial record");
            out.resize(len, tail);
            out
        })
        .collect();
    let n = runs.len() as f64;
    (0..len)
        .map(|k| {
            let s = filled.iter().fold((0.0, 0.0, 0.0), |a, v| (a.0 + v[k].0, a.1 + v[k].1, a.2 + v[k].2));
            CurvePoint {
                k,
                epochs: s.0 / n,
                wall_ms: s.1 / n,
                error: s.2 / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub measure: Measure,
    pub reference: Option<Reference>,
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunResult>,
}

/// The problem described by the configuration.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<CompositeProblem> {
    let ds = cfg.dataset.load()?;
    CompositeProblem::new(Arc::new(ds), cfg.problem.loss, cfg.problem.mu)
}

/// Runs every (method, seed) pair and writes `runs/*.csv`, `curves/*.csv`,
/// `summary.csv` and `reference.json` below `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let p = build_problem(cfg)?;
    let (measure, reference) = match p.loss {
        LossKind::Logistic => {
            let cache = cfg
                .reference
                .cache
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("reference.json"));
            let r = reference_solution(&p, &cfg.reference, Some(&cache))?;
            (Measure::RelativeError { psi_star: r.psi }, Some(r))
        }
        LossKind::Sigmoid => (Measure::Residual, None),
    };
    let mut jobs = Vec::new();
    for &m in &cfg.methods {
        let setup = cfg.setup(m, p.n_points(), measure)?;
        let seeds: Vec<u64> = if m.is_stochastic() {
            cfg.seeds.clone()
        } else {
            vec![cfg.seeds.first().copied().unwrap_or(0)]
        };
        for s in seeds {
            jobs.push((m, s, setup.clone()));
        }
    }
    let run = |(m, s, setup): &(Method, u64, MethodSetup)| -> Result<RunResult> {
        Ok(RunResult {
            method: *m,
            seed: *s,
            trace: setup.run(&p, *m, *s)?,
        })
    };
    let runs: Vec<RunResult> = if cfg.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let runs_dir = cfg.out_dir.join("runs");
    let curves_dir = cfg.out_dir.join("curves");
    fs::create_dir_all(&runs_dir)?;
    fs::create_dir_all(&curves_dir)?;
    for r in &runs {
        let f = fs::File::create(runs_dir.join(format!("{}_seed{}.csv", r.method, r.seed)))?;
        write_records(&r.trace.records, f)?;
    }
    for &m in &cfg.methods {
        let group: Vec<&RunResult> = runs.iter().filter(|r| r.method == m).collect();
        let mut wtr = csv::Writer::from_path(curves_dir.join(format!("{m}.csv")))?;
        for pt in mean_curve(&group, measure) {
            wtr.serialize(pt)?;
        }
        wtr.flush()?;
    }
    let rows = compare_summary(&runs, measure, &tolerance_grid());
    write_summary(&rows, fs::File::create(cfg.out_dir.join("summary.csv"))?)?;
    Ok(ExperimentSummary {
        measure,
        reference,
        rows,
        runs,
    })
}
