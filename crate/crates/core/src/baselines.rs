//! First-order reference methods: Adagrad with a diagonal prox metric and
//! mini-batch prox-SVRG with an adaptive scalar metric.

use serde::{Deserialize, Serialize};

use crate::driver::{full_residual, update_lambda, Clock, S4NConfig};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, dist};
use crate::model::Composite;
use crate::oracles::{OracleConfig, OracleState};
use crate::prox::{prox_l1, shrink};
use crate::trace::{RunStatus, StepType, Trace, TraceRecord, TraceSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdagradConfig {
    pub batch_size: usize,
    pub delta: f64,
    /// The scalar `lambda` in `Lambda_k = lambda^-1 diag(delta + sqrt(G_k))`.
    pub step_scale: f64,
    pub max_iters: usize,
    pub max_epochs: f64,
    pub stop_tol: f64,
    pub psi_target: Option<f64>,
    pub check_every: usize,
    pub timing: bool,
    pub seed: u64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            delta: 1e-7,
            step_scale: 0.1,
            max_iters: 1000,
            max_epochs: f64::INFINITY,
            stop_tol: 1e-10,
            psi_target: None,
            check_every: 10,
            timing: true,
            seed: 0,
        }
    }
}

impl AdagradConfig {
    /// Batch of `floor(0.05 N)` (at least one).
    pub fn for_points(n_points: usize) -> Self {
        Self {
            batch_size: (n_points / 20).max(1),
            ..Self::default()
        }
    }
}

/// The step-scale grid `{i 10^j : i = 1..9, j = -2..1}`.
pub fn adagrad_grid() -> Vec<f64> {
    let mut out = Vec::with_capacity(36);
    for j in -2..=1 {
        for i in 1..=9 {
            out.push(i as f64 * 10f64.powi(j));
        }
    }
    out
}

/// Soft-thresholding with a separate threshold per coordinate.
pub fn prox_l1_diag(u: &[f64], thresholds: &[f64]) -> Vec<f64> {
    u.iter().zip(thresholds).map(|(&v, &t)| shrink(v, t)).collect()
}

/// Per-coordinate step sizes `lambda / (delta + sqrt(G_i))`.
pub fn adagrad_steps(accum: &[f64], delta: f64, step_scale: f64) -> Vec<f64> {
    accum.iter().map(|g| step_scale / (delta + g.sqrt())).collect()
}

struct Recorder {
    records: Vec<TraceRecord>,
    last_full: Option<f64>,
    clock: Clock,
}

impl Recorder {
    fn new(timing: bool) -> Self {
        Self {
            records: Vec::new(),
            last_full: None,
            clock: Clock::new(timing),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push<P: Composite + ?Sized>(
        &mut self,
        p: &P,
        x: &[f64],
        k: usize,
        check: bool,
        stoch_res: f64,
        lambda: f64,
        grad_size: usize,
        epochs: f64,
    ) -> Result<(f64, Option<f64>)> {
        let full = if check { Some(full_residual(p, x)?) } else { None };
        if full.is_some() {
            self.last_full = full;
        }
        let psi = p.objective(x);
        self.records.push(TraceRecord {
            k,
            step_type: if k == 0 { StepType::Init } else { StepType::Prox },
            psi,
            full_res: full,
            stoch_res,
            theta: None,
            lambda,
            grad_size,
            hess_size: 0,
            epochs,
            wall_ms: self.clock.ms(),
        });
        Ok((psi, full))
    }

    fn finish(self, method: &str, status: RunStatus, iterations: usize, x: Vec<f64>) -> Trace {
        let final_psi = self.records.last().map_or(f64::NAN, |r| r.psi);
        Trace {
            summary: TraceSummary {
                method: method.to_string(),
                status,
                iterations,
                newton_accepted: 0,
                fallbacks: 0,
                invariant_violations: 0,
                final_psi,
                final_full_res: self.last_full,
            },
            records: self.records,
            x,
        }
    }
}

fn should_stop(psi: f64, full: Option<f64>, stop_tol: f64, target: Option<f64>) -> bool {
    matches!(full, Some(r) if r <= stop_tol) || matches!(target, Some(t) if psi <= t)
}

pub fn adagrad_run<P: Composite + ?Sized>(p: &P, cfg: &AdagradConfig) -> Result<Trace> {
    if !(cfg.delta > 0.0 && cfg.step_scale > 0.0) {
        return Err(Error::Config("delta and step_scale must be positive".into()));
    }
    if cfg.check_every == 0 {
        return Err(Error::Config("check_every must be positive".into()));
    }
    let n = p.n_points();
    let mut oracle = OracleState::new(
        OracleConfig {
            grad_size0: cfg.batch_size.clamp(1, n),
            grad_cap: cfg.batch_size.clamp(1, n),
            seed: cfg.seed,
            ..OracleConfig::default()
        },
        n,
    )?;
    let mu = p.reg_weight();
    let mut x = vec![0.0; p.dim()];
    let mut accum = vec![0.0; p.dim()];
    let mut rec = Recorder::new(cfg.timing);
    let mut stoch_res = 0.0;
    let mut status = RunStatus::MaxIters;
    let mut k = 0;
    loop {
        let check = k % cfg.check_every == 0 || k == cfg.max_iters;
        let (psi, full) = rec.push(p, &x, k, check, stoch_res, cfg.step_scale, oracle.grad_size, oracle.epochs())?;
        if !all_finite(&x) || !psi.is_finite() {
            status = RunStatus::NonFinite;
            break;
        }
        if should_stop(psi, full, cfg.stop_tol, cfg.psi_target) {
            status = RunStatus::Converged;
            break;
        }
        if k >= cfg.max_iters || oracle.epochs() >= cfg.max_epochs {
            break;
        }
        let batch = oracle.draw_grad_batch();
        let g = oracle.gradient(p, &x, &batch)?;
        for (a, gi) in accum.iter_mut().zip(&g) {
            *a += gi * gi;
        }
        let steps = adagrad_steps(&accum, cfg.delta, cfg.step_scale);
        let u: Vec<f64> = x.iter().zip(&g).zip(&steps).map(|((xi, gi), s)| xi - s * gi).collect();
        let thresholds: Vec<f64> = steps.iter().map(|s| mu * s).collect();
        let next = prox_l1_diag(&u, &thresholds);
        stoch_res = dist(&x, &next);
        x = next;
        k += 1;
    }
    Ok(rec.finish("adagrad", status, k, x))
}

/// Picks the grid value with the smallest mean final objective over `seeds`.
pub fn adagrad_grid_search<P: Composite + ?Sized>(
    p: &P,
    base: &AdagradConfig,
    seeds: &[u64],
) -> Result<Vec<(f64, f64)>> {
    if seeds.is_empty() {
        return Err(Error::Config("grid search needs at least one seed".into()));
    }
    let mut out = Vec::new();
    for scale in adagrad_grid() {
        let mut total = 0.0;
        for &seed in seeds {
            let cfg = AdagradConfig {
                step_scale: scale,
                seed,
                timing: false,
                ..base.clone()
            };
            let t = adagrad_run(p, &cfg)?;
            total += if t.summary.final_psi.is_finite() {
                t.summary.final_psi
            } else {
                f64::INFINITY
            };
        }
        out.push((scale, total / seeds.len() as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxSvrgConfig {
    pub batch_size: usize,
    /// Anchor refresh period.
    pub m: usize,
    pub lambda0: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_ema: f64,
    pub max_iters: usize,
    pub max_epochs: f64,
    pub stop_tol: f64,
    pub psi_target: Option<f64>,
    pub check_every: usize,
    pub timing: bool,
    pub seed: u64,
}

impl Default for ProxSvrgConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            m: 10,
            lambda0: 0.1,
            lambda_min: 1e-3,
            lambda_max: 1e4,
            lambda_ema: 0.5,
            max_iters: 1000,
            max_epochs: f64::INFINITY,
            stop_tol: 1e-10,
            psi_target: None,
            check_every: 10,
            timing: true,
            seed: 0,
        }
    }
}

impl ProxSvrgConfig {
    /// Batch of `floor(0.01 N)` (at least one) and `m = 10`.
    pub fn for_points(n_points: usize) -> Self {
        Self {
            batch_size: (n_points / 100).max(1),
            ..Self::default()
        }
    }
}

pub fn proxsvrg_run<P: Composite + ?Sized>(p: &P, cfg: &ProxSvrgConfig) -> Result<Trace> {
    if cfg.m == 0 || cfg.check_every == 0 {
        return Err(Error::Config("m and check_every must be positive".into()));
    }
    let lam_cfg = S4NConfig {
        lambda_min: cfg.lambda_min,
        lambda_max: cfg.lambda_max,
        lambda_ema: cfg.lambda_ema,
        ..S4NConfig::default()
    };
    let n = p.n_points();
    let mut oracle = OracleState::new(
        OracleConfig {
            grad_size0: cfg.batch_size.clamp(1, n),
            grad_cap: cfg.batch_size.clamp(1, n),
            vr_period: Some(cfg.m),
            seed: cfg.seed,
            ..OracleConfig::default()
        },
        n,
    )?;
    let mu = p.reg_weight();
    let mut x = vec![0.0; p.dim()];
    let mut lambda = cfg.lambda0;
    let mut prev_anchor: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut rec = Recorder::new(cfg.timing);
    let mut stoch_res = 0.0;
    let mut status = RunStatus::MaxIters;
    let mut k = 0;
    loop {
        let check = k % cfg.check_every == 0 || k == cfg.max_iters;
        let (psi, full) = rec.push(p, &x, k, check, stoch_res, lambda, oracle.grad_size, oracle.epochs())?;
        if !all_finite(&x) || !psi.is_finite() {
            status = RunStatus::NonFinite;
            break;
        }
        if should_stop(psi, full, cfg.stop_tol, cfg.psi_target) {
            status = RunStatus::Converged;
            break;
        }
        if k >= cfg.max_iters || oracle.epochs() >= cfg.max_epochs {
            break;
        }
        if oracle.maybe_refresh(p, &x, k)? {
            let (ax, au) = oracle.anchor().expect("just refreshed");
            let (ax, au) = (ax.to_vec(), au.to_vec());
            if let Some((px, pu)) = &prev_anchor {
                lambda = update_lambda(lambda, px, pu, &ax, &au, &lam_cfg);
            }
            prev_anchor = Some((ax, au));
        }
        let batch = oracle.draw_grad_batch();
        let g = oracle.gradient(p, &x, &batch)?;
        let u: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - lambda * gi).collect();
        let next = prox_l1(&u, mu * lambda);
        stoch_res = dist(&x, &next);
        x = next;
        k += 1;
    }
    Ok(rec.finish("prox-svrg", status, k, x))
}
