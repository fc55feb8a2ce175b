//! The regularized semismooth Newton system `(M + rho I) d = -F` with
//! `M = (I - D) + lambda D H`, solved on the active coordinates only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, LinearOperator};
use crate::prox::{JacobianMask, ProxMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Cg,
    Minres,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonConfig {
    pub cg_tol0: f64,
    /// Lower clamp on the relative tolerance.
    pub cg_tol_min: f64,
    pub cg_maxit0: usize,
    pub cg_maxit_total: usize,
    /// `rho = reg_coeff * min(1, |F|)`.
    pub reg_coeff: f64,
    pub solver: SolverKind,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            cg_tol0: 0.01,
            cg_tol_min: 1e-8,
            cg_maxit0: 2,
            cg_maxit_total: 12,
            reg_coeff: 1e-4,
            solver: SolverKind::Cg,
        }
    }
}

impl NewtonConfig {
    /// MINRES with up to 32 iterations, the setting for the nonconvex loss.
    pub fn minres() -> Self {
        Self {
            cg_maxit_total: 32,
            solver: SolverKind::Minres,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cg_tol0 > 0.0 && self.cg_tol0 < 1.0) {
            return Err(Error::Config(format!("cg_tol0 {} not in (0, 1)", self.cg_tol0)));
        }
        if !(self.cg_tol_min > 0.0 && self.cg_tol_min <= self.cg_tol0) {
            return Err(Error::Config("cg_tol_min must lie in (0, cg_tol0]".into()));
        }
        if self.cg_maxit0 < 1 || self.cg_maxit0 > self.cg_maxit_total {
            return Err(Error::Config(
                "need 1 <= cg_maxit0 <= cg_maxit_total".into(),
            ));
        }
        if !(self.reg_coeff >= 0.0) {
            return Err(Error::Config("reg_coeff must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Accuracy and regularization for one Newton solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KrylovPolicy {
    pub tol: f64,
    pub maxit: usize,
    pub rho: f64,
}

/// Loose solves while the residual is large, two extra iterations per decade of
/// residual decrease, and `rho -> 0` with the residual.
pub fn adaptive_policy(res_norm: f64, res_norm0: f64, cfg: &NewtonConfig) -> KrylovPolicy {
    let tol = res_norm.clamp(cfg.cg_tol_min, cfg.cg_tol0);
    let ratio = res_norm0 / res_norm;
    let extra = if ratio.is_nan() {
        0
    } else if ratio >= 1.0 {
        let decades = ratio.log10().floor();
        if decades.is_finite() {
            2 * decades as usize
        } else {
            cfg.cg_maxit_total
        }
    } else {
        0
    };
    let maxit = cfg.cg_maxit_total.min(cfg.cg_maxit0.saturating_add(extra));
    let rho = cfg.reg_coeff * res_norm.min(1.0);
    KrylovPolicy { tol, maxit, rho }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIter,
    /// CG met a direction with `<p, A p> <= 0`.
    NonPositiveCurvature,
    /// The Krylov space became invariant.
    Breakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovOutcome {
    pub sol: Vec<f64>,
    pub iters: usize,
    /// Relative residual `||b - A x|| / ||b||` as tracked by the recurrence.
    pub rel_res: f64,
    pub stop: StopReason,
}

pub fn krylov_solve(
    op: &dyn LinearOperator,
    rhs: &[f64],
    tol: f64,
    maxit: usize,
    kind: SolverKind,
) -> Result<KrylovOutcome> {
    if !crate::linalg::all_finite(rhs) {
        return Err(Error::NonFinite("krylov right-hand side"));
    }
    let out = match kind {
        SolverKind::Cg => cg(op, rhs, tol, maxit),
        SolverKind::Minres => minres(op, rhs, tol, maxit),
    };
    if !crate::linalg::all_finite(&out.sol) || out.rel_res.is_nan() {
        return Err(Error::NonFinite("krylov iterate"));
    }
    Ok(out)
}

fn cg(op: &dyn LinearOperator, b: &[f64], tol: f64, maxit: usize) -> KrylovOutcome {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return KrylovOutcome {
            sol: x,
            iters: 0,
            rel_res: 0.0,
            stop: StopReason::Converged,
        };
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut ap = vec![0.0; n];
    let mut iters = 0;
    let mut stop = StopReason::MaxIter;
    while iters < maxit {
        op.apply(&p, &mut ap);
        iters += 1;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            stop = StopReason::NonPositiveCurvature;
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            rr = rr_new;
            stop = StopReason::Converged;
            break;
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    KrylovOutcome {
        sol: x,
        iters,
        rel_res: rr.sqrt() / bnorm,
        stop,
    }
}

fn minres(op: &dyn LinearOperator, b: &[f64], tol: f64, maxit: usize) -> KrylovOutcome {
    let n = b.len();
    let mut x = vec![0.0; n];
    let beta1 = norm(b);
    if beta1 == 0.0 {
        return KrylovOutcome {
            sol: x,
            iters: 0,
            rel_res: 0.0,
            stop: StopReason::Converged,
        };
    }
    let mut r1 = b.to_vec();
    let mut r2 = b.to_vec();
    let mut y = b.to_vec();
    let mut v = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    let mut w2 = vec![0.0; n];

    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln) = (0.0f64, 0.0f64);
    let mut phibar = beta1;
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut iters = 0;
    let mut stop = StopReason::MaxIter;

    while iters < maxit {
        iters += 1;
        let s = 1.0 / beta;
        for (vi, yi) in v.iter_mut().zip(&y) {
            *vi = s * yi;
        }
        op.apply(&v, &mut y);
        if iters >= 2 {
            axpy(-beta / oldb, &r1, &mut y);
        }
        let alfa = dot(&v, &y);
        axpy(-alfa / beta, &r2, &mut y);
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        oldb = beta;
        beta = norm(&r2);

        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;

        std::mem::swap(&mut w1, &mut w2);
        std::mem::swap(&mut w2, &mut w);
        for i in 0..n {
            w[i] = (v[i] - oldeps * w1[i] - delta * w2[i]) / gamma;
        }
        axpy(phi, &w, &mut x);

        if phibar.abs() <= tol * beta1 {
            stop = StopReason::Converged;
            break;
        }
        if beta == 0.0 {
            stop = StopReason::Breakdown;
            break;
        }
    }
    KrylovOutcome {
        sol: x,
        iters,
        rel_res: phibar.abs() / beta1,
        stop,
    }
}

/// `v_A -> lambda (H [v_A; 0])_A + rho v_A`
pub struct ReducedOperator<'a> {
    hess: &'a dyn LinearOperator,
    active: &'a [usize],
    lambda: f64,
    rho: f64,
}

impl<'a> ReducedOperator<'a> {
    pub fn new(hess: &'a dyn LinearOperator, active: &'a [usize], lambda: f64, rho: f64) -> Self {
        Self {
            hess,
            active,
            lambda,
            rho,
        }
    }
}

impl LinearOperator for ReducedOperator<'_> {
    fn dim(&self) -> usize {
        self.active.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.hess.dim();
        let mut full = vec![0.0; n];
        for (&i, &vi) in self.active.iter().zip(v) {
            full[i] = vi;
        }
        let mut hv = vec![0.0; n];
        self.hess.apply(&full, &mut hv);
        for ((o, &i), &vi) in out.iter_mut().zip(self.active).zip(v) {
            *o = self.lambda * hv[i] + self.rho * vi;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub active: usize,
    pub iters: usize,
    pub rel_res: f64,
    pub stop: StopReason,
    /// Number of full Hessian-vector products used.
    pub hess_applications: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonStep {
    pub d: Vec<f64>,
    pub stats: SolveStats,
}

/// Solves `((I - D) + lambda D H + rho I) d = -F`.
///
/// Inactive rows give `d_I = -F_I / (1 + rho)`; the active block is the
/// symmetric system `(lambda H_AA + rho I) d_A = -F_A - lambda (H d_I)_A`.
pub fn newton_step(
    f: &[f64],
    mask: &JacobianMask,
    hess: &dyn LinearOperator,
    metric: ProxMetric,
    policy: KrylovPolicy,
    kind: SolverKind,
) -> Result<NewtonStep> {
    let n = f.len();
    let lam = metric.lambda();
    let rho = policy.rho;
    let mut d = vec![0.0; n];
    for i in 0..n {
        if !mask.active[i] {
            d[i] = -f[i] / (1.0 + rho);
        }
    }
    let active = mask.active_indices();
    if active.is_empty() {
        return Ok(NewtonStep {
            d,
            stats: SolveStats {
                active: 0,
                iters: 0,
                rel_res: 0.0,
                stop: StopReason::Converged,
                hess_applications: 0,
            },
        });
    }

    let mut rhs: Vec<f64> = active.iter().map(|&i| -f[i]).collect();
    let mut hess_applications = 0;
    if d.iter().any(|&v| v != 0.0) {
        let hd = hess.apply_vec(&d);
        hess_applications += 1;
        for (r, &i) in rhs.iter_mut().zip(&active) {
            *r -= lam * hd[i];
        }
    }

    let reduced = ReducedOperator::new(hess, &active, lam, rho);
    let out = krylov_solve(&reduced, &rhs, policy.tol, policy.maxit, kind)?;
    hess_applications += out.iters;
    for (&i, &v) in active.iter().zip(&out.sol) {
        d[i] = v;
    }
    Ok(NewtonStep {
        d,
        stats: SolveStats {
            active: active.len(),
            iters: out.iters,
            rel_res: out.rel_res,
            stop: out.stop,
            hess_applications,
        },
    })
}
