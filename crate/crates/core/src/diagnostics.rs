//! Randomized checks of the inequalities behind the method: the metric-change
//! bound on the residual, the binary-sequence recursion bounds, approximate
//! descent of a proximal gradient step, the strong-convexity error bound and
//! the martingale tail bounds.
//!
//! Every check returns a [`DiagReport`]; `max_slack` is the largest observed
//! `lhs - rhs` (negative when every trial holds with room to spare).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::datakit::{synth_binary, SynthSpec};
use crate::driver::{s2nd_run, S4NConfig};
use crate::error::{invalid, Error, Result};
use crate::linalg::{dist, norm, sub};
use crate::model::{Batch, Composite, CompositeProblem, L2Augmented, LossKind, SmoothLoss};
use crate::newton::NewtonConfig;
use crate::oracles::{kappa, sample_without_replacement};
use crate::prox::{residual, ProxMetric};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub check: String,
    pub trials: usize,
    pub max_slack: f64,
    pub violations: usize,
    pub pass: bool,
}

/// One trial outcome: the inequality `lhs <= rhs + tol`.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    lhs: f64,
    rhs: f64,
    tol: f64,
}

fn summarize(check: &str, outcomes: &[Outcome]) -> DiagReport {
    let mut max_slack = f64::NEG_INFINITY;
    let mut violations = 0;
    for o in outcomes {
        let s = o.lhs - o.rhs;
        max_slack = max_slack.max(if s.is_nan() { f64::INFINITY } else { s });
        if !(s <= o.tol) {
            violations += 1;
        }
    }
    DiagReport {
        check: check.to_string(),
        trials: outcomes.len(),
        max_slack,
        violations,
        pass: violations == 0,
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Log-uniform draw from `[lo, hi]`.
fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

// ---------------------------------------------------------------------------
// metric change

/// Factor `c` with `||F^{lam1}|| <= c ||F^{lam2}||` for scalar step sizes.
///
/// With `Lambda_i = lam_i^{-1} I` the weight matrix is `w I`, `w = lam2/lam1`,
/// and the general factor `(1 + w + |1 - w|)/2 * lam1/lam2` collapses to
/// `max(1, lam1/lam2)`.
pub fn metric_bound_factor(lam1: f64, lam2: f64) -> f64 {
    let w = lam2 / lam1;
    0.5 * (1.0 + w + (1.0 - w).abs()) * (lam1 / lam2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricBoundConfig {
    pub dim: usize,
    pub trials: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub mu: f64,
    pub seed: u64,
}

impl Default for MetricBoundConfig {
    fn default() -> Self {
        Self {
            dim: 20,
            trials: 10_000,
            lambda_lo: 1e-3,
            lambda_hi: 1e4,
            mu: 0.01,
            seed: 1,
        }
    }
}

/// `(||F^{lam1}(x)||, c * ||F^{lam2}(x)||)` for a fixed gradient `g`.
pub fn metric_bound_sides(x: &[f64], g: &[f64], mu: f64, lam1: f64, lam2: f64) -> Result<(f64, f64)> {
    let f1 = norm(&residual(x, g, ProxMetric::new(lam1)?, mu).f);
    let f2 = norm(&residual(x, g, ProxMetric::new(lam2)?, mu).f);
    Ok((f1, metric_bound_factor(lam1, lam2) * f2))
}

pub fn check_metric_bound(cfg: &MetricBoundConfig) -> Result<DiagReport> {
    if !(cfg.lambda_lo > 0.0 && cfg.lambda_hi >= cfg.lambda_lo) {
        return Err(invalid("lambda range must be positive and ordered"));
    }
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let scale = log_uniform(&mut rng, 1e-3, 1e2);
            let x = gaussian_vec(&mut rng, cfg.dim, scale);
            let g_scale = log_uniform(&mut rng, 1e-3, 1e2);
            let g = gaussian_vec(&mut rng, cfg.dim, g_scale);
            let lam1 = log_uniform(&mut rng, cfg.lambda_lo, cfg.lambda_hi);
            let lam2 = log_uniform(&mut rng, cfg.lambda_lo, cfg.lambda_hi);
            let (lhs, rhs) = metric_bound_sides(&x, &g, cfg.mu, lam1, lam2)?;
            // rounding in x - prox(x - lam g) scales with |x| + lam |g|, and
            // the right side multiplies its rounding error by the factor
            let (nx, ng) = (norm(&x), norm(&g));
            let scale = nx + lam1 * ng + metric_bound_factor(lam1, lam2) * (nx + lam2 * ng);
            Ok(Outcome {
                lhs,
                rhs,
                tol: 1e-12 * (rhs + scale),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize("metric_bound", &outcomes))
}

// ---------------------------------------------------------------------------
// binary-sequence recursion

/// Data of the recursion `a_{k+1} = (eta + nu_k)^{Y_k} a_k + Y_k eps_k`.
///
/// `nu` and `eps` are finite prefixes; later terms are taken to be zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConvParams {
    pub a0: f64,
    pub eta: f64,
    pub p: f64,
    pub q: f64,
    pub nu: Vec<f64>,
    pub eps: Vec<f64>,
}

impl GenConvParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a0 >= 0.0
            && self.eta > 0.0
            && self.eta < 1.0
            && self.p > 0.0
            && self.p <= 1.0
            && self.q >= self.p
            && self.q <= 1.0
            && self.nu.iter().chain(&self.eps).all(|v| *v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(invalid("need a0 >= 0, eta in (0,1), 0 < p <= q <= 1 and nonnegative sequences"))
        }
    }

    /// `exp(sum nu / eta)`
    pub fn c_nu(&self) -> f64 {
        (self.nu.iter().sum::<f64>() / self.eta).exp()
    }

    /// Uniform bound on every `a_k`.
    pub fn c_z(&self) -> f64 {
        self.c_nu() * (self.a0 + self.eps.iter().sum::<f64>())
    }

    /// Bound on `sum_k Y_k a_{k+1}^q`.
    pub fn c_z_q(&self) -> f64 {
        let q = self.q;
        self.c_nu().powf(q) / (1.0 - self.eta.powf(q))
            * ((self.eta * self.a0).powf(q) + self.eps.iter().map(|e| e.powf(q)).sum::<f64>())
    }
}

/// Runs the recursion for `R = y.len()` steps and checks both bounds.
///
/// Returns `a_0, ..., a_R`; the report has `R + 1` trials (one per iterate
/// plus the weighted sum).
pub fn genconv_simulate(gp: &GenConvParams, y: &[bool]) -> Result<(Vec<f64>, DiagReport)> {
    gp.validate()?;
    let term = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
    let mut a = Vec::with_capacity(y.len() + 1);
    a.push(gp.a0);
    for (k, &yk) in y.iter().enumerate() {
        let prev = a[k];
        a.push(if yk {
            (gp.eta + term(&gp.nu, k)) * prev + term(&gp.eps, k)
        } else {
            prev
        });
    }
    let cz = gp.c_z();
    let mut outcomes: Vec<Outcome> = a[1..]
        .iter()
        .map(|&ak| Outcome {
            lhs: ak,
            rhs: cz,
            tol: 1e-12 * cz.max(1.0),
        })
        .collect();
    let weighted: f64 = y
        .iter()
        .zip(&a[1..])
        .filter(|(yk, _)| **yk)
        .map(|(_, ak)| ak.powf(gp.q))
        .sum();
    let czq = gp.c_z_q();
    outcomes.push(Outcome {
        lhs: weighted,
        rhs: czq,
        tol: 1e-12 * czq.max(1.0),
    });
    let report = summarize("genconv", &outcomes);
    Ok((a, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConvConfig {
    pub sequences: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for GenConvConfig {
    fn default() -> Self {
        Self {
            sequences: 1000,
            max_len: 400,
            seed: 2,
        }
    }
}

/// Random binary sequences with random summable `nu` and `p`-summable `eps`.
pub fn check_genconv(cfg: &GenConvConfig) -> Result<DiagReport> {
    if cfg.max_len == 0 {
        return Err(invalid("max_len must be positive"));
    }
    let outcomes = (0..cfg.sequences)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let len = rng.random_range(1..=cfg.max_len);
            let eta = rng.random_range(0.05..0.99);
            let p = rng.random_range(0.2..=1.0);
            let q = rng.random_range(p..=1.0);
            // nu ~ c k^-r with r > 1, eps ~ c k^-r with r p > 1
            let (cn, rn) = (rng.random_range(0.0..0.5), rng.random_range(1.05..3.0));
            let (ce, re) = (rng.random_range(0.0..5.0), rng.random_range(1.05 / p..4.0 / p));
            let density = rng.random::<f64>();
            let nu = (0..len)
                .map(|k| cn * rng.random::<f64>() * ((k + 1) as f64).powf(-rn))
                .collect();
            let eps = (0..len)
                .map(|k| ce * rng.random::<f64>() * ((k + 1) as f64).powf(-re))
                .collect();
            let y: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < density).collect();
            let gp = GenConvParams {
                a0: log_uniform(&mut rng, 1e-3, 1e3),
                eta,
                p,
                q,
                nu,
                eps,
            };
            let (_, r) = genconv_simulate(&gp, &y)?;
            Ok(Outcome {
                lhs: r.max_slack,
                rhs: 0.0,
                tol: if r.pass { f64::INFINITY } else { f64::NEG_INFINITY },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize("genconv", &outcomes))
}

// ---------------------------------------------------------------------------
// approximate descent of a proximal gradient step

/// Largest admissible damping `2 (1 - gamma rho) lambda_m / L`, with
/// `lambda_m = 1/lambda` for the scalar metric.
pub fn prox_descent_alpha_bar(gamma: f64, rho: f64, lambda: f64, lipschitz: f64) -> f64 {
    2.0 * (1.0 - gamma * rho) / (lambda * lipschitz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxDescentConfig {
    pub gamma: f64,
    pub rho: f64,
    pub trials: usize,
    /// Use the full gradient in every trial.
    pub full_batch: bool,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub seed: u64,
}

impl Default for ProxDescentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            rho: 1.5,
            trials: 1000,
            full_batch: false,
            lambda_lo: 1e-2,
            lambda_hi: 1e2,
            seed: 3,
        }
    }
}

/// `(psi(x + alpha v) - psi(x), -alpha gamma ||v||^2_Lambda + err)` where
/// `v = -F_s(x)` and `err = alpha/(4 gamma (rho-1) lambda_m) ||grad f - G_s||^2`.
pub fn prox_descent_sides<P: Composite + ?Sized>(
    p: &P,
    x: &[f64],
    batch: &Batch,
    lambda: f64,
    alpha: f64,
    gamma: f64,
    rho: f64,
) -> Result<(f64, f64)> {
    let full = p.loss_grad(x, &Batch::All)?;
    let g = match batch {
        Batch::All => full.clone(),
        b => p.loss_grad(x, b)?,
    };
    let f = residual(x, &g, ProxMetric::new(lambda)?, p.reg_weight()).f;
    let z: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi - alpha * fi).collect();
    let lhs = p.objective(&z) - p.objective(x);
    let v_sq = f.iter().map(|v| v * v).sum::<f64>() / lambda;
    let err_sq = dist(&full, &g).powi(2);
    let lambda_m = 1.0 / lambda;
    let rhs = -alpha * gamma * v_sq + alpha / (4.0 * gamma * (rho - 1.0) * lambda_m) * err_sq;
    Ok((lhs, rhs))
}

pub fn check_prox_descent<P: Composite + ?Sized>(p: &P, cfg: &ProxDescentConfig) -> Result<DiagReport> {
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0 && cfg.rho > 1.0 && cfg.rho < 1.0 / cfg.gamma) {
        return Err(invalid("need gamma in (0,1) and rho in (1, 1/gamma)"));
    }
    let lip = p.lipschitz_bound();
    let n = p.n_points();
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let scale = log_uniform(&mut rng, 1e-2, 1e1);
            let x = gaussian_vec(&mut rng, p.dim(), scale);
            let lambda = log_uniform(&mut rng, cfg.lambda_lo, cfg.lambda_hi);
            let a_max = prox_descent_alpha_bar(cfg.gamma, cfg.rho, lambda, lip).min(1.0);
            // include the endpoints
            let alpha = match t % 10 {
                0 => 0.0,
                1 => a_max,
                _ => a_max * rng.random::<f64>(),
            };
            let batch = if cfg.full_batch {
                Batch::All
            } else {
                let size = rng.random_range(1..=n);
                Batch::Indices(sample_without_replacement(n, size, &mut rng)?)
            };
            let (lhs, rhs) = prox_descent_sides(p, &x, &batch, lambda, alpha, cfg.gamma, cfg.rho)?;
            let psi = p.objective(&x);
            Ok(Outcome {
                lhs,
                rhs,
                tol: 1e-12 * psi.abs().max(1.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = if cfg.full_batch {
        "prox_descent_full"
    } else {
        "prox_descent"
    };
    Ok(summarize(name, &outcomes))
}

// ---------------------------------------------------------------------------
// strong-convexity error bound

/// Constants of the error bound
/// `||x - x*||^2 <= B1(tau) ||F_s(x)||^2 + B2(tau) ||grad f(x) - G_s(x)||^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongConvexityCerts {
    pub mu_f: f64,
    pub mu_r: f64,
    pub mu_bar: f64,
    pub lipschitz: f64,
    pub lambda_m: f64,
    pub lambda_cap: f64,
    pub b1: f64,
    pub b2: f64,
}

impl StrongConvexityCerts {
    /// `lambda_m <= lambda_cap` bound the metric's spectrum.
    pub fn new(mu_f: f64, mu_r: f64, lipschitz: f64, lambda_m: f64, lambda_cap: f64) -> Result<Self> {
        let mu_bar = mu_f + mu_r;
        if !(mu_r >= 0.0 && mu_bar > 0.0 && mu_f.abs() <= lipschitz) {
            return Err(Error::InvalidCerts(format!(
                "need mu_r >= 0, mu_f + mu_r > 0 and |mu_f| <= L (mu_f = {mu_f}, mu_r = {mu_r}, L = {lipschitz})"
            )));
        }
        if !(lambda_m > 0.0 && lambda_cap >= lambda_m) {
            return Err(Error::InvalidCerts("need 0 < lambda_m <= lambda_M".into()));
        }
        let b1 = lipschitz - 2.0 * lambda_m - mu_r;
        let b2 = (lambda_cap + mu_r).powi(2) / mu_bar;
        if !(b2 > 0.0 && b2.is_finite()) {
            return Err(Error::InvalidCerts(format!("b2 = {b2} must be positive")));
        }
        Ok(Self {
            mu_f,
            mu_r,
            mu_bar,
            lipschitz,
            lambda_m,
            lambda_cap,
            b1,
            b2,
        })
    }

    /// Certificates for the scalar metric `Lambda = lambda^{-1} I`.
    pub fn for_scalar_metric(mu_f: f64, mu_r: f64, lipschitz: f64, lambda: f64) -> Result<Self> {
        Self::new(mu_f, mu_r, lipschitz, 1.0 / lambda, 1.0 / lambda)
    }

    fn check_tau(&self, tau: f64) -> Result<f64> {
        let c = self.b1 + self.b2 + tau;
        if !(tau >= 0.0 && c > 0.0) {
            return Err(Error::InvalidCerts(format!("b1 + b2 + tau = {c} must be positive")));
        }
        Ok(c)
    }

    /// The Young parameter `sqrt((b1 + b2 + tau) / b2)`.
    pub fn alpha(&self, tau: f64) -> Result<f64> {
        Ok((self.check_tau(tau)? / self.b2).sqrt())
    }

    pub fn big_b1(&self, tau: f64) -> Result<f64> {
        let c = self.check_tau(tau)?;
        Ok((1.0 + tau) / self.mu_bar * (c.sqrt() + self.b2.sqrt()).powi(2))
    }

    /// Infinite at `tau = 0`.
    pub fn big_b2(&self, tau: f64) -> Result<f64> {
        let a = self.alpha(tau)?;
        let m = self.mu_bar;
        Ok((1.0 + tau) * (1.0 + a) * (a * m + (1.0 + tau) * (1.0 + a)) / (tau * a * a * m * m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrConvConfig {
    pub tau: f64,
    pub lambda: f64,
    pub trials: usize,
    pub full_batch: bool,
    pub seed: u64,
}

impl Default for StrConvConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            lambda: 1.0,
            trials: 1000,
            full_batch: false,
            seed: 4,
        }
    }
}

/// `(||x - x*||^2, B1 ||F_s(x)||^2 + B2 ||grad f - G_s||^2)`; with the full
/// batch the bound uses `B1(0)` and no error term.
pub fn strconv_sides<P: Composite + ?Sized>(
    p: &P,
    certs: &StrongConvexityCerts,
    x_star: &[f64],
    x: &[f64],
    batch: &Batch,
    tau: f64,
    lambda: f64,
) -> Result<(f64, f64)> {
    let lhs = dist(x, x_star).powi(2);
    let full = p.loss_grad(x, &Batch::All)?;
    let metric = ProxMetric::new(lambda)?;
    let rhs = match batch {
        Batch::All => certs.big_b1(0.0)? * norm(&residual(x, &full, metric, p.reg_weight()).f).powi(2),
        b => {
            let g = p.loss_grad(x, b)?;
            let f = residual(x, &g, metric, p.reg_weight()).f;
            certs.big_b1(tau)? * norm(&f).powi(2) + certs.big_b2(tau)? * norm(&sub(&full, &g)).powi(2)
        }
    };
    Ok((lhs, rhs))
}

/// Random points around `x_star` and random batches.
pub fn check_strconv_bound<P: Composite + ?Sized>(
    p: &P,
    certs: &StrongConvexityCerts,
    x_star: &[f64],
    cfg: &StrConvConfig,
) -> Result<DiagReport> {
    if !(cfg.tau > 0.0) && !cfg.full_batch {
        return Err(invalid("sampled gradients need tau > 0"));
    }
    let expected = StrongConvexityCerts::for_scalar_metric(certs.mu_f, certs.mu_r, certs.lipschitz, cfg.lambda)?;
    if certs.lambda_m > expected.lambda_m || certs.lambda_cap < expected.lambda_cap {
        return Err(Error::InvalidCerts("metric spectrum is not covered by the certificates".into()));
    }
    let n = p.n_points();
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let x: Vec<f64> = if t == 0 {
                x_star.to_vec()
            } else {
                let scale = log_uniform(&mut rng, 1e-4, 1e1);
                let d = gaussian_vec(&mut rng, p.dim(), scale);
                x_star.iter().zip(&d).map(|(a, b)| a + b).collect()
            };
            let batch = if cfg.full_batch {
                Batch::All
            } else {
                let size = rng.random_range(1..=n);
                Batch::Indices(sample_without_replacement(n, size, &mut rng)?)
            };
            let (lhs, rhs) = strconv_sides(p, certs, x_star, &x, &batch, cfg.tau, cfg.lambda)?;
            Ok(Outcome {
                lhs,
                rhs,
                tol: 1e-10 * rhs + 1e-18,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = if cfg.full_batch {
        "strconv_bound_full"
    } else {
        "strconv_bound"
    };
    Ok(summarize(name, &outcomes))
}

// ---------------------------------------------------------------------------
// martingale tails

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDist {
    Gaussian,
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SumKind {
    /// Sums of random vectors in `R^dim`.
    Vector { dim: usize },
    /// Sums of symmetric `n x n` matrices, measured in the spectral norm.
    Matrix { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationConfig {
    pub kind: SumKind,
    pub dist: NoiseDist,
    /// Number of summands.
    pub m: usize,
    pub trials: usize,
    pub tau: f64,
    pub seed: u64,
}

/// Empirical frequency of one tail event next to its bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub event: String,
    pub threshold: f64,
    pub empirical: f64,
    pub bound: f64,
    pub mc_sigma: f64,
}

impl TailEstimate {
    pub fn holds(&self) -> bool {
        self.bound >= 1.0 || self.empirical <= self.bound + 3.0 * self.mc_sigma
    }
}

/// Per-summand scales `(s2, s_exp)`: `E||X||^2 <= s2` and
/// `E exp(||X||^2 / s_exp) <= e`.
///
/// Gaussian vectors have `||X||^2 ~ chi^2_dim`. The Gaussian matrix has
/// independent `N(0,1)` off-diagonal and `N(0,2)` diagonal entries, so
/// `||X||_F^2` is a sum of `n(n+1)/2` copies of `2 chi^2_1`; the Frobenius norm
/// dominates the spectral norm. Rademacher summands have constant norms.
pub fn summand_scales(kind: SumKind, dist: NoiseDist) -> (f64, f64) {
    match (kind, dist) {
        (SumKind::Vector { dim }, NoiseDist::Gaussian) => {
            let d = dim as f64;
            (d, 2.0 / (1.0 - (-2.0 / d).exp()))
        }
        (SumKind::Vector { dim }, NoiseDist::Rademacher) => (dim as f64, dim as f64),
        (SumKind::Matrix { n }, NoiseDist::Gaussian) => {
            let terms = (n * (n + 1)) as f64 / 2.0;
            (2.0 * terms, 4.0 / (1.0 - (-2.0 / terms).exp()))
        }
        (SumKind::Matrix { n }, NoiseDist::Rademacher) => {
            let f = (n * n) as f64;
            (f, f)
        }
    }
}

fn draw_sum(kind: SumKind, dist: NoiseDist, m: usize, rng: &mut ChaCha8Rng) -> f64 {
    let draw = |rng: &mut ChaCha8Rng| match dist {
        NoiseDist::Gaussian => StandardNormal.sample(rng),
        NoiseDist::Rademacher => {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    };
    match kind {
        SumKind::Vector { dim } => {
            let mut s = vec![0.0; dim];
            for _ in 0..m {
                for v in s.iter_mut() {
                    *v += draw(rng);
                }
            }
            norm(&s)
        }
        SumKind::Matrix { n } => {
            let mut s = DMatrix::<f64>::zeros(n, n);
            let diag_scale = match dist {
                NoiseDist::Gaussian => std::f64::consts::SQRT_2,
                NoiseDist::Rademacher => 1.0,
            };
            for _ in 0..m {
                for i in 0..n {
                    s[(i, i)] += diag_scale * draw(rng);
                    for j in 0..i {
                        let v = draw(rng);
                        s[(i, j)] += v;
                        s[(j, i)] += v;
                    }
                }
            }
            s.symmetric_eigenvalues().iter().fold(0.0f64, |a, e| a.max(e.abs()))
        }
    }
}

/// Monte Carlo tail frequencies of `||sum_k X_k||` against the second-moment
/// bounds (`tau^-2`, `kappa_n tau^-2`) and the light-tail bounds
/// (`exp(-tau^2/3)`, `2n exp(-tau^2/3)`).
pub fn concentration_mc(cfg: &ConcentrationConfig) -> Result<(DiagReport, Vec<TailEstimate>)> {
    let size = match cfg.kind {
        SumKind::Vector { dim } => dim,
        SumKind::Matrix { n } => n,
    };
    if size == 0 || cfg.m == 0 || cfg.trials == 0 || !(cfg.tau > 0.0) {
        return Err(invalid("dimension, m, trials and tau must be positive"));
    }
    let (s2, s_exp) = summand_scales(cfg.kind, cfg.dist);
    let sigma2 = (cfg.m as f64 * s2).sqrt();
    let sigma_exp = (cfg.m as f64 * s_exp).sqrt();
    let tau = cfg.tau;
    let (light_threshold, light_bound, moment_bound) = match cfg.kind {
        SumKind::Vector { .. } => ((1.0 + tau) * sigma_exp, (-tau * tau / 3.0).exp(), tau.powi(-2)),
        SumKind::Matrix { n } => (
            tau * sigma_exp,
            2.0 * n as f64 * (-tau * tau / 3.0).exp(),
            kappa(n) * tau.powi(-2),
        ),
    };
    let moment_threshold = tau * sigma2;
    let (hits_moment, hits_light) = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let s = draw_sum(cfg.kind, cfg.dist, cfg.m, &mut rng);
            ((s >= moment_threshold) as usize, (s >= light_threshold) as usize)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let trials = cfg.trials as f64;
    let estimate = |event: &str, threshold: f64, hits: usize, bound: f64| {
        let b = bound.min(1.0);
        TailEstimate {
            event: event.to_string(),
            threshold,
            empirical: hits as f64 / trials,
            bound,
            mc_sigma: (b * (1.0 - b) / trials).sqrt(),
        }
    };
    let ests = vec![
        estimate("second_moment", moment_threshold, hits_moment, moment_bound),
        estimate("light_tail", light_threshold, hits_light, light_bound),
    ];
    let outcomes: Vec<Outcome> = ests
        .iter()
        .map(|e| Outcome {
            lhs: e.empirical,
            rhs: e.bound,
            tol: if e.holds() { f64::INFINITY } else { 3.0 * e.mc_sigma },
        })
        .collect();
    let label = match cfg.kind {
        SumKind::Vector { .. } => "concentration_vector",
        SumKind::Matrix { .. } => "concentration_matrix",
    };
    let mut report = summarize(label, &outcomes);
    report.trials = cfg.trials;
    Ok((report, ests))
}

// ---------------------------------------------------------------------------
// named suite

/// The checks runnable by name, each on a fixed, seeded instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagCheck {
    MetricBound,
    Genconv,
    ProxDescent,
    ProxDescentFull,
    Strconv,
    StrconvFull,
    ConcentrationVector,
    ConcentrationMatrix,
}

impl DiagCheck {
    pub fn all() -> [DiagCheck; 8] {
        use DiagCheck::*;
        [
            MetricBound,
            Genconv,
            ProxDescent,
            ProxDescentFull,
            Strconv,
            StrconvFull,
            ConcentrationVector,
            ConcentrationMatrix,
        ]
    }

    pub fn name(self) -> &'static str {
        use DiagCheck::*;
        match self {
            MetricBound => "metric-bound",
            Genconv => "genconv",
            ProxDescent => "prox-descent",
            ProxDescentFull => "prox-descent-full",
            Strconv => "strconv",
            StrconvFull => "strconv-full",
            ConcentrationVector => "concentration-vector",
            ConcentrationMatrix => "concentration-matrix",
        }
    }

    /// Trial count used when none is given.
    pub fn default_trials(self) -> usize {
        use DiagCheck::*;
        match self {
            MetricBound => 10_000,
            ConcentrationVector | ConcentrationMatrix => 100_000,
            _ => 1000,
        }
    }
}

impl std::fmt::Display for DiagCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DiagCheck {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DiagCheck::all()
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown check '{s}'")))
    }
}

/// A report plus, for the tail checks, the per-event estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub report: DiagReport,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub tails: Vec<TailEstimate>,
}

/// Small synthetic l1-logistic instance shared by the problem-based checks.
pub fn suite_problem(n_points: usize, n_features: usize) -> Result<CompositeProblem> {
    let ds = synth_binary(&SynthSpec {
        n_points,
        n_features,
        density: 0.4,
        seed: 11,
        noise: 0.1,
    })?;
    CompositeProblem::new(Arc::new(ds), LossKind::Logistic, 0.01)
}

/// Runs one named check. `trials` falls back to [`DiagCheck::default_trials`].
pub fn run_check(check: DiagCheck, trials: Option<usize>, seed: u64) -> Result<CheckResult> {
    let trials = trials.unwrap_or(check.default_trials());
    let plain = |report| CheckResult {
        report,
        tails: Vec::new(),
    };
    match check {
        DiagCheck::MetricBound => check_metric_bound(&MetricBoundConfig {
            trials,
            seed,
            ..Default::default()
        })
        .map(plain),
        DiagCheck::Genconv => check_genconv(&GenConvConfig {
            sequences: trials,
            seed,
            ..Default::default()
        })
        .map(plain),
        DiagCheck::ProxDescent | DiagCheck::ProxDescentFull => check_prox_descent(
            &suite_problem(80, 10)?,
            &ProxDescentConfig {
                trials,
                full_batch: check == DiagCheck::ProxDescentFull,
                seed,
                ..Default::default()
            },
        )
        .map(plain),
        DiagCheck::Strconv | DiagCheck::StrconvFull => {
            let l2 = 0.05;
            let p = L2Augmented::new(suite_problem(120, 8)?, l2);
            let sol = s2nd_run(
                &p,
                &S4NConfig {
                    stop_tol: 1e-13,
                    timing: false,
                    ..Default::default()
                },
                &NewtonConfig::default(),
            )?;
            let cfg = StrConvConfig {
                trials,
                full_batch: check == DiagCheck::StrconvFull,
                seed,
                ..Default::default()
            };
            let certs = StrongConvexityCerts::for_scalar_metric(l2, 0.0, p.lipschitz_bound(), cfg.lambda)?;
            check_strconv_bound(&p, &certs, &sol.x, &cfg).map(plain)
        }
        DiagCheck::ConcentrationVector | DiagCheck::ConcentrationMatrix => {
            // tau keeps every bound below one
            let (kind, tau) = match check {
                DiagCheck::ConcentrationVector => (SumKind::Vector { dim: 10 }, 2.0),
                _ => (SumKind::Matrix { n: 8 }, 4.0),
            };
            let mut tails = Vec::new();
            let mut reports = Vec::new();
            for (i, dist) in [NoiseDist::Gaussian, NoiseDist::Rademacher].into_iter().enumerate() {
                let (r, mut t) = concentration_mc(&ConcentrationConfig {
                    kind,
                    dist,
                    m: 20,
                    trials,
                    tau,
                    seed: seed.wrapping_add(i as u64),
                })?;
                for e in t.iter_mut() {
                    e.event = format!("{dist:?}/{}", e.event).to_lowercase();
                }
                tails.extend(t);
                reports.push(r);
            }
            let report = DiagReport {
                check: check.name().replace('-', "_"),
                trials,
                max_slack: reports.iter().map(|r| r.max_slack).fold(f64::NEG_INFINITY, f64::max),
                violations: reports.iter().map(|r| r.violations).sum(),
                pass: reports.iter().all(|r| r.pass),
            };
            Ok(CheckResult { report, tails })
        }
    }
}
