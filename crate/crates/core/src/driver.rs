//! The globalized stochastic semismooth Newton loop.
//!
//! Each iteration forms a Newton trial point from the stochastic residual,
//! evaluates the residual there on a fresh gradient batch, and accepts the
//! trial point if the residual has not grown too much relative to `theta`, the
//! residual norm of the last accepted Newton iterate. Rejected trial points are
//! replaced by a damped proximal gradient step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm};
use crate::model::{Batch, Composite};
use crate::newton::{adaptive_policy, newton_step, NewtonConfig};
use crate::oracles::{OracleConfig, OracleState};
use crate::prox::{jacobian_mask, residual, ProxMetric};
use crate::seq::SeqRule;
use crate::trace::{RunStatus, StepType, Trace, TraceRecord, TraceSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct S4NConfig {
    pub eta: f64,
    pub p_exp: f64,
    pub beta: f64,
    pub nu: SeqRule,
    pub eps1: SeqRule,
    pub eps2: SeqRule,
    /// Fallback step size.
    pub alpha: f64,
    pub check_growth2: bool,
    /// `None` starts from the first stochastic residual norm.
    pub theta0: Option<f64>,
    pub lambda0: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Weight of the new estimate in the moving average of `lambda`.
    pub lambda_ema: f64,
    pub adapt_lambda: bool,
    pub max_iters: usize,
    /// Work budget in epochs.
    pub max_epochs: f64,
    /// Stop once `||F^I(x)|| <= stop_tol`.
    pub stop_tol: f64,
    /// Stop once `psi(x) <= psi_target`.
    pub psi_target: Option<f64>,
    /// Evaluate the exact residual every this many iterations.
    pub check_every: usize,
    /// Count termination checks as work.
    pub charge_termination: bool,
    /// Record wall time (off gives reproducible CSV output).
    pub timing: bool,
    /// Reject every Newton step.
    pub force_reject: bool,
}

impl Default for S4NConfig {
    fn default() -> Self {
        Self {
            eta: 0.85,
            p_exp: 0.5,
            beta: 1.0,
            nu: SeqRule::power(500.0, 1.1),
            eps1: SeqRule::power(500.0, 1.1),
            eps2: SeqRule::power(500.0, 1.1),
            alpha: 1e-2,
            check_growth2: false,
            theta0: None,
            lambda0: 0.1,
            lambda_min: 1e-3,
            lambda_max: 1e4,
            lambda_ema: 0.5,
            adapt_lambda: true,
            max_iters: 500,
            max_epochs: f64::INFINITY,
            stop_tol: 1e-10,
            psi_target: None,
            check_every: 10,
            charge_termination: false,
            timing: true,
            force_reject: false,
        }
    }
}

impl S4NConfig {
    /// Sets `nu_k = eps1_k = c_nu k^-1.1`.
    pub fn with_c_nu(mut self, c_nu: f64) -> Self {
        self.nu = SeqRule::power(c_nu, 1.1);
        self.eps1 = SeqRule::power(c_nu, 1.1);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad("eta must lie in (0, 1)");
        }
        if !(self.p_exp > 0.0 && self.p_exp < 1.0) {
            return bad("p_exp must lie in (0, 1)");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        for (name, s) in [("nu", &self.nu), ("eps1", &self.eps1), ("eps2", &self.eps2)] {
            if !s.is_nonnegative() {
                return Err(Error::Config(format!("{name} must be nonnegative")));
            }
        }
        if !self.nu.is_summable() {
            return bad("nu must be summable");
        }
        if !self.eps2.is_summable() {
            return bad("eps2 must be summable");
        }
        // eps1 needs p-summability only together with the second growth test
        let p = if self.check_growth2 { self.p_exp } else { 1.0 };
        if !self.eps1.is_p_summable(p) {
            return Err(Error::Config(format!("eps1^{p} must be summable")));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.lambda_min > 0.0 && self.lambda_min <= self.lambda_max) {
            return bad("need 0 < lambda_min <= lambda_max");
        }
        if !(self.lambda0 > 0.0) {
            return bad("lambda0 must be positive");
        }
        if !(self.lambda_ema > 0.0 && self.lambda_ema <= 1.0) {
            return bad("lambda_ema must lie in (0, 1]");
        }
        if matches!(self.theta0, Some(t) if !(t >= 0.0)) {
            return bad("theta0 must be nonnegative");
        }
        if self.check_every == 0 {
            return bad("check_every must be positive");
        }
        Ok(())
    }
}

/// `res_new <= (eta + nu_k) theta + eps1_k`
pub fn check_growth1(res_new: f64, theta: f64, k: usize, cfg: &S4NConfig) -> bool {
    res_new <= (cfg.eta + cfg.nu.at(k)) * theta + cfg.eps1.at(k)
}

/// `psi_new <= psi_old + beta theta^(1-p) res_new^p + eps2_k`, with `0^0 = 1`.
pub fn check_growth2(
    psi_new: f64,
    psi_old: f64,
    theta: f64,
    res_new: f64,
    k: usize,
    cfg: &S4NConfig,
) -> bool {
    let p = cfg.p_exp;
    let pow = |b: f64, e: f64| if e == 0.0 { 1.0 } else { b.powf(e) };
    psi_new <= psi_old + cfg.beta * pow(theta, 1.0 - p) * pow(res_new, p) + cfg.eps2.at(k)
}

/// `x - alpha F`
pub fn prox_grad_step(x: &[f64], f: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(f).map(|(xi, fi)| xi - alpha * fi).collect()
}

/// Clipped secant estimate `||dx|| / ||dg||` blended into the previous value.
/// A vanishing `||dg||` keeps the previous value.
pub fn update_lambda(
    lambda: f64,
    x_prev: &[f64],
    g_prev: &[f64],
    x_new: &[f64],
    g_new: &[f64],
    cfg: &S4NConfig,
) -> f64 {
    let dg = crate::linalg::dist(g_new, g_prev);
    if !(dg >= 1e-15) {
        return lambda;
    }
    let raw = crate::linalg::dist(x_new, x_prev) / dg;
    let clipped = raw.clamp(cfg.lambda_min, cfg.lambda_max);
    (1.0 - cfg.lambda_ema) * lambda + cfg.lambda_ema * clipped
}

/// `||F^I(x)||` with the exact gradient.
pub fn full_residual<P: Composite + ?Sized>(p: &P, x: &[f64]) -> Result<f64> {
    let g = p.loss_grad(x, &Batch::All)?;
    let unit = ProxMetric::new(1.0).expect("positive");
    Ok(norm(&residual(x, &g, unit, p.reg_weight()).f))
}

pub(crate) struct Clock {
    start: Instant,
    on: bool,
}

impl Clock {
    pub(crate) fn new(on: bool) -> Self {
        Self {
            start: Instant::now(),
            on,
        }
    }

    pub(crate) fn ms(&self) -> f64 {
        if self.on {
            self.start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    }
}

/// Runs the method from `x = 0`.
pub fn s4n_run<P: Composite + ?Sized>(
    p: &P,
    oracle: OracleState,
    cfg: &S4NConfig,
    ncfg: &NewtonConfig,
) -> Result<Trace> {
    s4n_run_from(p, oracle, cfg, ncfg, vec![0.0; p.dim()], "s4n")
}

pub fn s4n_run_from<P: Composite + ?Sized>(
    p: &P,
    mut oracle: OracleState,
    cfg: &S4NConfig,
    ncfg: &NewtonConfig,
    x0: Vec<f64>,
    method: &str,
) -> Result<Trace> {
    cfg.validate()?;
    ncfg.validate()?;
    if x0.len() != p.dim() {
        return Err(Error::InvalidArgument(format!(
            "x0 has length {} but the problem has dimension {}",
            x0.len(),
            p.dim()
        )));
    }
    let clock = Clock::new(cfg.timing);
    let n_points = p.n_points() as u64;
    let mu = p.reg_weight();

    let mut x = x0;
    let mut lambda = cfg.lambda0;
    oracle.advance_schedule(0);
    let (mut g, _) = oracle.stochastic_gradient(p, &x, 0)?;
    let first = residual(&x, &g, ProxMetric::new(lambda)?, mu);
    let res0 = norm(&first.f);
    let mut theta = cfg.theta0.unwrap_or(res0);

    let mut records = Vec::new();
    let mut last_step = StepType::Init;
    let mut accepted = 0;
    let mut fallbacks = 0;
    let mut violations = 0;
    let mut status = RunStatus::MaxIters;
    let mut last_full = None;
    let mut k = 0;

    loop {
        let refreshed = k > 0 && oracle.maybe_refresh(p, &x, k)?;
        if refreshed {
            g = oracle.gradient(p, &x, &Batch::All)?;
        }
        let metric = ProxMetric::new(lambda)?;
        let res = residual(&x, &g, metric, mu);
        let stoch_res = norm(&res.f);
        if last_step == StepType::Newton && !refreshed && stoch_res != theta {
            violations += 1;
        }

        let full_res = if k % cfg.check_every == 0 || k == cfg.max_iters {
            if cfg.charge_termination {
                oracle.charge(n_points);
            }
            Some(full_residual(p, &x)?)
        } else {
            None
        };
        if full_res.is_some() {
            last_full = full_res;
        }
        let psi = p.objective(&x);
        records.push(TraceRecord {
            k,
            step_type: last_step,
            psi,
            full_res,
            stoch_res,
            theta: Some(theta),
            lambda,
            grad_size: oracle.grad_size,
            hess_size: oracle.hess_size,
            epochs: oracle.epochs(),
            wall_ms: clock.ms(),
        });
        if !all_finite(&x) || !psi.is_finite() || !stoch_res.is_finite() {
            status = RunStatus::NonFinite;
            break;
        }
        if matches!(full_res, Some(r) if r <= cfg.stop_tol)
            || matches!(cfg.psi_target, Some(t) if psi <= t)
        {
            status = RunStatus::Converged;
            break;
        }
        if k >= cfg.max_iters || oracle.epochs() >= cfg.max_epochs {
            break;
        }

        // Newton trial point
        let mask = jacobian_mask(&res.u, mu * lambda);
        let (hess, t_batch) = oracle.stochastic_hess_operator(p, &x)?;
        let policy = adaptive_policy(stoch_res, res0, ncfg);
        let step = newton_step(&res.f, &mask, hess.as_ref(), metric, policy, ncfg.solver);
        drop(hess);
        let d = match step {
            Ok(s) => {
                oracle.charge_hessian(&t_batch, s.stats.hess_applications);
                Some(s.d)
            }
            Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e),
        };

        oracle.advance_schedule(k + 1);
        let batch = oracle.draw_grad_batch();

        let mut trial = None;
        if let Some(d) = &d {
            let z: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + di).collect();
            if all_finite(&z) && !cfg.force_reject {
                let gz = oracle.gradient(p, &z, &batch)?;
                let lam_z = if cfg.adapt_lambda {
                    update_lambda(lambda, &x, &g, &z, &gz, cfg)
                } else {
                    lambda
                };
                let res_z = norm(&residual(&z, &gz, ProxMetric::new(lam_z)?, mu).f);
                let mut ok = res_z.is_finite() && check_growth1(res_z, theta, k, cfg);
                if ok && cfg.check_growth2 {
                    oracle.charge(n_points);
                    ok = check_growth2(p.objective(&z), psi, theta, res_z, k, cfg);
                }
                if ok {
                    trial = Some((z, gz, lam_z, res_z));
                }
            }
        }

        let x_prev = x.clone();
        let theta_prev = theta;
        let accepted_now = trial.is_some();
        match trial {
            Some((z, gz, lam_z, res_z)) => {
                x = z;
                g = gz;
                lambda = lam_z;
                theta = res_z;
                accepted += 1;
                last_step = StepType::Newton;
            }
            None => {
                let zp = prox_grad_step(&x, &res.f, cfg.alpha);
                let gp = oracle.gradient(p, &zp, &batch)?;
                if cfg.adapt_lambda {
                    lambda = update_lambda(lambda, &x, &g, &zp, &gp, cfg);
                }
                x = zp;
                g = gp;
                fallbacks += 1;
                last_step = StepType::Fallback;
            }
        }

        // x^{k+1} = (1 - Y)(x - alpha F) + Y (x + d)
        let recursion_ok = x.iter().enumerate().all(|(i, &xi)| {
            let expect = if accepted_now {
                x_prev[i] + d.as_ref().expect("accepted steps have a direction")[i]
            } else {
                x_prev[i] - cfg.alpha * res.f[i]
            };
            xi.to_bits() == expect.to_bits()
        });
        if !recursion_ok || (!accepted_now && theta != theta_prev) {
            violations += 1;
        }
        k += 1;
    }

    let last = records.last().expect("at least one record");
    Ok(Trace {
        summary: TraceSummary {
            method: method.to_string(),
            status,
            iterations: k,
            newton_accepted: accepted,
            fallbacks,
            invariant_violations: violations,
            final_psi: last.psi,
            final_full_res: last_full,
        },
        records,
        x,
    })
}

/// Exact gradients and Hessians; the residual is checked every iteration.
pub fn s2nd_run<P: Composite + ?Sized>(p: &P, cfg: &S4NConfig, ncfg: &NewtonConfig) -> Result<Trace> {
    let oracle = OracleState::new(OracleConfig::deterministic(), p.n_points())?;
    let cfg = S4NConfig {
        check_every: 1,
        ..cfg.clone()
    };
    s4n_run_from(p, oracle, &cfg, ncfg, vec![0.0; p.dim()], "s2n-d")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::LinearOperator;
    use crate::model::SmoothLoss;

    /// `f(x) = (1/2)(x - 1)^2` with `r = 0.1 |x|` in one dimension.
    struct Quadratic1d;

    struct Scalar(f64);

    impl LinearOperator for Scalar {
        fn dim(&self) -> usize {
            1
        }
        fn apply(&self, v: &[f64], out: &mut [f64]) {
            out[0] = self.0 * v[0];
        }
    }

    impl SmoothLoss for Quadratic1d {
        fn n_points(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn loss_value(&self, x: &[f64], _: &Batch) -> Result<f64> {
            Ok(0.5 * (x[0] - 1.0).powi(2))
        }
        fn loss_grad(&self, x: &[f64], _: &Batch) -> Result<Vec<f64>> {
            Ok(vec![x[0] - 1.0])
        }
        fn loss_hess_vec(&self, _: &[f64], _: &Batch, v: &[f64]) -> Result<Vec<f64>> {
            Ok(v.to_vec())
        }
        fn hess_operator<'a>(
            &'a self,
            _: &[f64],
            _: &Batch,
        ) -> Result<Box<dyn LinearOperator + Send + Sync + 'a>> {
            Ok(Box::new(Scalar(1.0)))
        }
        fn lipschitz_bound(&self) -> f64 {
            1.0
        }
    }

    impl Composite for Quadratic1d {
        fn reg_weight(&self) -> f64 {
            0.1
        }
    }

    #[test]
    fn default_parameters() {
        let c = S4NConfig::default();
        assert_eq!((c.eta, c.alpha, c.lambda0), (0.85, 1e-2, 0.1));
        assert_eq!(c.nu, SeqRule::power(500.0, 1.1));
        assert_eq!(c.eps1, c.nu);
        assert!(!c.check_growth2);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn growth2_requires_p_summable_eps1() {
        let c = S4NConfig {
            check_growth2: true,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = S4NConfig {
            eps1: SeqRule::power(1.0, 2.25),
            ..c
        };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn growth1_examples() {
        let c = S4NConfig {
            nu: SeqRule::Constant { value: 0.5 },
            eps1: SeqRule::Constant { value: 0.1 },
            ..Default::default()
        };
        assert!(check_growth1(1.45, 1.0, 3, &c));
        assert!(!check_growth1(1.4500001, 1.0, 3, &c));
        assert!(check_growth1(0.0, 0.0, 3, &S4NConfig::default()));
        let tight = S4NConfig {
            nu: SeqRule::Zero,
            eps1: SeqRule::Zero,
            ..Default::default()
        };
        assert!(check_growth1(0.0, 0.0, 1, &tight));
        assert!(!check_growth1(1e-300, 0.0, 1, &tight));
    }

    #[test]
    fn growth2_examples() {
        let c = S4NConfig {
            beta: 1.0,
            p_exp: 0.5,
            eps2: SeqRule::Zero,
            ..Default::default()
        };
        assert!(check_growth2(3.0, 1.0, 4.0, 1.0, 1, &c));
        assert!(!check_growth2(3.0 + 1e-12, 1.0, 4.0, 1.0, 1, &c));
        assert!(check_growth2(0.5, 1.0, 0.0, 0.0, 1, &c));
        assert!(check_growth2(1.0, 1.0, 0.0, 0.0, 1, &c));
    }

    #[test]
    fn prox_grad_step_examples() {
        assert_eq!(prox_grad_step(&[1.0, 2.0], &[0.0, 0.0], 0.5), vec![1.0, 2.0]);
        // mu = 0 and alpha = 1: x - lambda grad
        let m = ProxMetric::new(0.3).unwrap();
        let f = residual(&[1.0], &[2.0], m, 0.0).f;
        assert!((prox_grad_step(&[1.0], &f, 1.0)[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn lambda_update_examples() {
        let c = S4NConfig::default();
        assert_eq!(update_lambda(0.1, &[1.0], &[2.0], &[1.0], &[2.0], &c), 0.1);
        // raw estimate 1e6 is clipped to 1e4 before blending
        let l = update_lambda(0.1, &[0.0], &[0.0], &[1.0], &[1e-6], &c);
        assert!((l - (0.05 + 0.5e4)).abs() < 1e-9);
        let l = update_lambda(0.1, &[0.0], &[0.0], &[1.0], &[4.0], &c);
        assert!((l - 0.175).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_problem_converges_to_analytic_point() {
        let cfg = S4NConfig {
            stop_tol: 1e-12,
            timing: false,
            ..Default::default()
        };
        let t = s2nd_run(&Quadratic1d, &cfg, &NewtonConfig::default()).unwrap();
        assert_eq!(t.summary.status, RunStatus::Converged);
        assert!((t.x[0] - 0.9).abs() < 1e-10);
        assert!(full_residual(&Quadratic1d, &t.x).unwrap() <= 1e-10);
        assert_eq!(t.summary.invariant_violations, 0);
    }

    #[test]
    fn forced_fallback_decreases_objective() {
        let cfg = S4NConfig {
            force_reject: true,
            adapt_lambda: false,
            lambda0: 0.5,
            alpha: 1.0,
            max_iters: 50,
            stop_tol: 0.0,
            timing: false,
            ..Default::default()
        };
        let t = s2nd_run(&Quadratic1d, &cfg, &NewtonConfig::default()).unwrap();
        assert_eq!(t.summary.newton_accepted, 0);
        for w in t.records.windows(2) {
            // strict while the decrease is above rounding, monotone afterwards
            assert!(w[1].psi < w[0].psi || w[0].full_res.unwrap() < 1e-6);
            assert!(w[1].psi <= w[0].psi + 1e-15);
        }
    }

    #[test]
    fn mismatched_start_is_rejected() {
        let oracle = OracleState::new(OracleConfig::deterministic(), 1).unwrap();
        let r = s4n_run_from(
            &Quadratic1d,
            oracle,
            &S4NConfig::default(),
            &NewtonConfig::default(),
            vec![0.0; 2],
            "s4n",
        );
        assert!(r.is_err());
    }
}
