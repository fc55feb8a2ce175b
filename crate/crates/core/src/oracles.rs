//! Stochastic first- and second-order oracles.
//!
//! Gradients come either from a plain mini-batch or from the SVRG-style control
//! variate `mean_S(grad f_i(x) - grad f_i(anchor)) + grad f(anchor)`. Batch
//! sizes follow a staged geometric schedule. The theoretical lower bounds on
//! sample sizes are provided separately by [`theoretical_schedule`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::LinearOperator;
use crate::model::{Batch, SmoothLoss};
use crate::seq::SeqRule;

/// `size` distinct indices drawn uniformly from `0..n`, returned sorted.
pub fn sample_without_replacement(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if size == 0 || size > n {
        return Err(invalid(format!("cannot draw {size} of {n} indices")));
    }
    let mut idx = rand::seq::index::sample(rng, n, size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub grad_size0: usize,
    pub grad_cap: usize,
    pub hess_size0: usize,
    pub hess_cap: usize,
    pub growth_factor: f64,
    pub grad_period: usize,
    pub hess_period: usize,
    /// Use the exact gradient regardless of the schedule.
    pub full_gradient: bool,
    /// Use the exact Hessian regardless of the schedule.
    pub full_hessian: bool,
    /// Anchor refresh period `m`; `None` disables variance reduction.
    pub vr_period: Option<usize>,
    /// Charge `|T|/N` epochs per Hessian-vector product.
    pub charge_hessian: bool,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grad_size0: 1,
            grad_cap: usize::MAX,
            hess_size0: 1,
            hess_cap: usize::MAX,
            growth_factor: 3.375,
            grad_period: 30,
            hess_period: 15,
            full_gradient: false,
            full_hessian: false,
            vr_period: None,
            charge_hessian: true,
            seed: 0,
        }
    }
}

impl OracleConfig {
    /// Exact gradients and Hessians.
    pub fn deterministic() -> Self {
        Self {
            full_gradient: true,
            full_hessian: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grad_size0 == 0 || self.hess_size0 == 0 {
            return Err(Error::Config("initial sample sizes must be positive".into()));
        }
        if !(self.growth_factor >= 1.0) {
            return Err(Error::Config("growth_factor must be >= 1".into()));
        }
        if self.grad_period == 0 || self.hess_period == 0 {
            return Err(Error::Config("schedule periods must be positive".into()));
        }
        if self.vr_period == Some(0) {
            return Err(Error::Config("vr_period must be positive".into()));
        }
        Ok(())
    }
}

/// Batch sizes and the variance-reduction anchor, plus the work counters used
/// for epoch accounting.
#[derive(Debug, Clone)]
pub struct OracleState {
    pub cfg: OracleConfig,
    n_points: usize,
    pub grad_size: usize,
    pub hess_size: usize,
    grad_cap: usize,
    hess_cap: usize,
    anchor_x: Option<Vec<f64>>,
    anchor_grad: Vec<f64>,
    rng: ChaCha8Rng,
    /// Component gradient evaluations so far.
    pub grad_evals: u64,
    /// Component Hessian-vector evaluations so far.
    pub hess_evals: u64,
}

impl OracleState {
    pub fn new(cfg: OracleConfig, n_points: usize) -> Result<Self> {
        cfg.validate()?;
        if n_points == 0 {
            return Err(Error::EmptySubset);
        }
        let grad_cap = cfg.grad_cap.clamp(1, n_points);
        let hess_cap = cfg.hess_cap.clamp(1, n_points);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut st = Self {
            n_points,
            grad_size: 0,
            hess_size: 0,
            grad_cap,
            hess_cap,
            anchor_x: None,
            anchor_grad: Vec::new(),
            rng,
            grad_evals: 0,
            hess_evals: 0,
            cfg,
        };
        st.advance_schedule(0);
        Ok(st)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn grad_cap(&self) -> usize {
        self.grad_cap
    }

    pub fn hess_cap(&self) -> usize {
        self.hess_cap
    }

    pub fn vr_enabled(&self) -> bool {
        self.cfg.vr_period.is_some()
    }

    pub fn anchor(&self) -> Option<(&[f64], &[f64])> {
        self.anchor_x
            .as_deref()
            .map(|x| (x, self.anchor_grad.as_slice()))
    }

    /// Work so far in passes over the data.
    pub fn epochs(&self) -> f64 {
        (self.grad_evals + self.hess_evals) as f64 / self.n_points as f64
    }

    /// Adds `evals` component gradient evaluations to the work counter.
    pub fn charge(&mut self, evals: u64) {
        self.grad_evals += evals;
    }

    /// Sample sizes in effect at iteration `k`.
    pub fn sizes_at(&self, k: usize) -> (usize, usize) {
        let c = &self.cfg;
        let grow = |s: usize, cap: usize| ((s as f64 * c.growth_factor).floor() as usize).clamp(s, cap);
        let mut g = c.grad_size0.min(self.grad_cap);
        let mut cap_at = if g >= self.grad_cap { Some(0) } else { None };
        for step in 1..=k / c.grad_period {
            if g >= self.grad_cap {
                break;
            }
            g = grow(g, self.grad_cap);
            if g >= self.grad_cap {
                cap_at = Some(step * c.grad_period);
            }
        }
        let mut h = c.hess_size0.min(self.hess_cap);
        if let Some(k0) = cap_at {
            for _ in 0..(k - k0) / c.hess_period {
                if h >= self.hess_cap {
                    break;
                }
                h = grow(h, self.hess_cap);
            }
        }
        (g, h)
    }

    /// Moves the batch sizes to their values at iteration `k`.
    pub fn advance_schedule(&mut self, k: usize) {
        let (g, h) = self.sizes_at(k);
        self.grad_size = g;
        self.hess_size = h;
    }

    fn draw(&mut self, size: usize, full: bool) -> Batch {
        if full || size >= self.n_points {
            Batch::All
        } else {
            Batch::Indices(
                sample_without_replacement(self.n_points, size, &mut self.rng)
                    .expect("size within 1..=N"),
            )
        }
    }

    /// A fresh gradient batch of the current size.
    pub fn draw_grad_batch(&mut self) -> Batch {
        self.draw(self.grad_size, self.cfg.full_gradient)
    }

    /// A fresh Hessian batch, independent of the gradient batch.
    pub fn draw_hess_batch(&mut self) -> Batch {
        self.draw(self.hess_size, self.cfg.full_hessian)
    }

    /// Sets the anchor to `x` when variance reduction is on and `k` is a multiple
    /// of the refresh period. Returns whether a refresh happened.
    pub fn maybe_refresh<P: SmoothLoss + ?Sized>(&mut self, p: &P, x: &[f64], k: usize) -> Result<bool> {
        match self.cfg.vr_period {
            Some(m) if k.is_multiple_of(m) => {
                self.refresh_anchor(p, x)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    pub fn refresh_anchor<P: SmoothLoss + ?Sized>(&mut self, p: &P, x: &[f64]) -> Result<()> {
        self.anchor_grad = p.loss_grad(x, &Batch::All)?;
        self.anchor_x = Some(x.to_vec());
        self.grad_evals += self.n_points as u64;
        Ok(())
    }

    /// Gradient estimate at `x` over `batch`, charging the work.
    pub fn gradient<P: SmoothLoss + ?Sized>(&mut self, p: &P, x: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        let size = batch.len(self.n_points) as u64;
        match (&self.cfg.vr_period, &self.anchor_x) {
            (Some(_), Some(ax)) => {
                if ax.as_slice() == x {
                    return Ok(self.anchor_grad.clone());
                }
                let gx = p.loss_grad(x, batch)?;
                let ga = p.loss_grad(ax, batch)?;
                self.grad_evals += 2 * size;
                Ok(gx
                    .iter()
                    .zip(&ga)
                    .zip(&self.anchor_grad)
                    .map(|((a, b), u)| (a - b) + u)
                    .collect())
            }
            (Some(_), None) => Err(invalid("variance reduction requires an anchor")),
            _ => {
                self.grad_evals += size;
                p.loss_grad(x, batch)
            }
        }
    }

    /// Draws a fresh gradient batch and evaluates the estimator at `x`.
    pub fn stochastic_gradient<P: SmoothLoss + ?Sized>(
        &mut self,
        p: &P,
        x: &[f64],
        k: usize,
    ) -> Result<(Vec<f64>, Batch)> {
        self.maybe_refresh(p, x, k)?;
        let batch = self.draw_grad_batch();
        let g = self.gradient(p, x, &batch)?;
        Ok((g, batch))
    }

    /// The sub-sampled Hessian at `x` over a fresh batch.
    pub fn stochastic_hess_operator<'a, P: SmoothLoss + ?Sized>(
        &mut self,
        p: &'a P,
        x: &[f64],
    ) -> Result<(Box<dyn LinearOperator + Send + Sync + 'a>, Batch)> {
        let batch = self.draw_hess_batch();
        Ok((p.hess_operator(x, &batch)?, batch))
    }

    /// Charges `applications` Hessian-vector products over `batch`.
    pub fn charge_hessian(&mut self, batch: &Batch, applications: usize) {
        if self.cfg.charge_hessian {
            self.hess_evals += (batch.len(self.n_points) * applications) as u64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Global acceptance of Newton steps.
    Global,
    /// r-linear rate `max(gamma_eta, 1/2)`.
    Linear,
    /// r-superlinear rate.
    Superlinear,
    /// Global acceptance under sub-Gaussian tails.
    LightTail,
}

/// Constants entering the sample-size lower bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub delta: SeqRule,
    pub sigma_bar: f64,
    pub rho_bar: f64,
    pub lambda_m: f64,
    pub gamma_f: f64,
    pub gamma_eta: f64,
    /// Problem dimension `n` in `kappa_n` and the light-tail Hessian bound.
    pub dim: usize,
    pub eps1: SeqRule,
    pub eps2: SeqRule,
    pub p: f64,
    /// The product `L_F * C`.
    pub lf_c: f64,
    /// Start index of the bounds.
    pub ell_bar: usize,
    /// `gamma_k -> 0` for the superlinear mode.
    pub gamma_seq: SeqRule,
    /// `rho_k -> 0` for the superlinear Hessian bound.
    pub rho_seq: SeqRule,
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("sigma_bar", self.sigma_bar),
            ("rho_bar", self.rho_bar),
            ("lambda_m", self.lambda_m),
            ("gamma_f", self.gamma_f),
            ("lf_c", self.lf_c),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma_eta > 0.0 && self.gamma_eta < 1.0) {
            return Err(invalid("gamma_eta must lie in (0, 1)"));
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(invalid("p must lie in (0, 1)"));
        }
        if self.dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        Ok(())
    }
}

/// `(2 ln(n + 2) - 1) e`
pub fn kappa(n: usize) -> f64 {
    (2.0 * ((n + 2) as f64).ln() - 1.0) * std::f64::consts::E
}

/// `min{(2 L_F C)^-1, 1} x`
pub fn mu_lin(x: f64, lf_c: f64) -> f64 {
    (1.0 / (2.0 * lf_c)).min(1.0) * x
}

/// `min{x, x^(1/p), x^(1/(1-p))}`
pub fn mu_pow(x: f64, p: f64) -> f64 {
    x.min(x.powf(1.0 / p)).min(x.powf(1.0 / (1.0 - p)))
}

/// `Upsilon_k` with `eps1` optionally capped by a rate term.
fn upsilon(sp: &ScheduleParams, k: usize, mode: ScheduleMode) -> f64 {
    let e1 = sp.eps1.at(k);
    let shift = k.saturating_sub(sp.ell_bar) as i32;
    let e1 = match mode {
        ScheduleMode::Linear => e1.min(sp.gamma_eta.powi(shift)),
        ScheduleMode::Superlinear => e1.min(sp.gamma_seq.at(k).powi(shift)),
        _ => e1,
    };
    mu_lin(e1, sp.lf_c).min(mu_pow(sp.eps2.at(k), sp.p))
}

/// `Gamma_k = min(Upsilon_{k-1}, Upsilon_k)` (or its linear/superlinear variant).
pub fn gamma_k(sp: &ScheduleParams, k: usize, mode: ScheduleMode) -> f64 {
    let cur = upsilon(sp, k, mode);
    if k == 0 {
        cur
    } else {
        cur.min(upsilon(sp, k - 1, mode))
    }
}

fn ceil_count(v: f64) -> Result<usize> {
    if !v.is_finite() || v > usize::MAX as f64 / 2.0 {
        return Err(Error::DegenerateSchedule(format!("sample size bound {v} is not representable")));
    }
    Ok(v.ceil().max(1.0) as usize)
}

/// Smallest sample sizes `(n_g, n_h)` satisfying the lower bounds at iteration `k`.
pub fn theoretical_schedule(sp: &ScheduleParams, k: usize, mode: ScheduleMode) -> Result<(usize, usize)> {
    sp.validate()?;
    if k < sp.ell_bar {
        return Err(invalid(format!("k = {k} precedes the schedule start {}", sp.ell_bar)));
    }
    let delta = sp.delta.at(k);
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::DegenerateSchedule(format!("delta_k = {delta} not in (0, 1)")));
    }
    let gam = gamma_k(sp, k, mode);
    if !(gam > 0.0) {
        return Err(Error::DegenerateSchedule(format!("Gamma_k = {gam} is not positive")));
    }
    let g_scale = (2.0 * sp.sigma_bar / (sp.lambda_m * gam)).powi(2);
    let h_scale = (2.0 * sp.rho_bar / (sp.lambda_m * sp.gamma_f)).powi(2);
    let (ng, nh) = match mode {
        ScheduleMode::Global | ScheduleMode::Linear => {
            (g_scale / delta, kappa(sp.dim) / delta * h_scale)
        }
        ScheduleMode::Superlinear => {
            let rho = sp.rho_seq.at(k);
            if !(rho > 0.0) {
                return Err(Error::DegenerateSchedule(format!("rho_k = {rho} is not positive")));
            }
            (g_scale / delta, 1.0 / (delta * rho))
        }
        ScheduleMode::LightTail => {
            let c = 1.0 + (3.0 * (1.0 / delta).ln()).sqrt();
            (
                c * c * g_scale,
                3.0 * (2.0 * sp.dim as f64 / delta).ln() * h_scale,
            )
        }
    };
    Ok((ceil_count(ng)?, ceil_count(nh)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{synth_binary, SynthSpec};
    use crate::model::{CompositeProblem, LossKind};
    use std::sync::Arc;

    fn problem(n_points: usize) -> CompositeProblem {
        let ds = synth_binary(&SynthSpec {
            n_points,
            n_features: 10,
            density: 0.5,
            seed: 1,
            noise: 0.1,
        })
        .unwrap();
        CompositeProblem::new(Arc::new(ds), LossKind::Logistic, 0.01).unwrap()
    }

    #[test]
    fn full_draw_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_without_replacement(10, 10, &mut rng).unwrap();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert!(sample_without_replacement(10, 11, &mut rng).is_err());
        assert!(sample_without_replacement(10, 0, &mut rng).is_err());
    }

    #[test]
    fn draws_are_seeded() {
        let a = sample_without_replacement(1000, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_without_replacement(1000, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 50);
    }

    #[test]
    fn growth_schedule_example() {
        let cfg = OracleConfig {
            grad_size0: 100,
            grad_cap: 1000,
            hess_size0: 100,
            hess_cap: 1000,
            ..Default::default()
        };
        let st = OracleState::new(cfg, 10_000).unwrap();
        assert_eq!(st.sizes_at(29), (100, 100));
        assert_eq!(st.sizes_at(30), (337, 100));
        assert_eq!(st.sizes_at(60), (1000, 100));
        assert_eq!(st.sizes_at(74), (1000, 100));
        assert_eq!(st.sizes_at(75), (1000, 337));
        assert_eq!(st.sizes_at(90), (1000, 1000));
        assert_eq!(st.sizes_at(10_000), (1000, 1000));
    }

    #[test]
    fn hessian_grows_only_after_gradient_cap() {
        let cfg = OracleConfig {
            grad_size0: 10,
            grad_cap: 100_000,
            hess_size0: 10,
            hess_cap: 1000,
            ..Default::default()
        };
        let st = OracleState::new(cfg, 5000).unwrap();
        let mut reached = false;
        for k in 0..400 {
            let (g, h) = st.sizes_at(k);
            if g < st.grad_cap() {
                assert_eq!(h, 10, "k = {k}");
            } else {
                reached = true;
            }
        }
        assert!(reached);
    }

    #[test]
    fn capped_schedule_is_constant() {
        let cfg = OracleConfig {
            grad_size0: 50,
            grad_cap: 50,
            hess_size0: 7,
            hess_cap: 7,
            ..Default::default()
        };
        let st = OracleState::new(cfg, 100).unwrap();
        for k in [0, 30, 60, 1000] {
            assert_eq!(st.sizes_at(k), (50, 7));
        }
    }

    #[test]
    fn full_batch_gradient_is_exact() {
        let p = problem(40);
        let mut st = OracleState::new(
            OracleConfig {
                grad_size0: 40,
                ..Default::default()
            },
            40,
        )
        .unwrap();
        let x = vec![0.2; 10];
        let (g, batch) = st.stochastic_gradient(&p, &x, 0).unwrap();
        assert_eq!(batch, Batch::All);
        assert_eq!(g, p.loss_grad(&x, &Batch::All).unwrap());
        assert_eq!(st.grad_evals, 40);
        assert_eq!(st.epochs(), 1.0);
    }

    #[test]
    fn vr_at_anchor_is_full_gradient() {
        let p = problem(60);
        let mut st = OracleState::new(
            OracleConfig {
                grad_size0: 6,
                grad_cap: 6,
                vr_period: Some(5),
                ..Default::default()
            },
            60,
        )
        .unwrap();
        let x = vec![0.3; 10];
        let (g, _) = st.stochastic_gradient(&p, &x, 0).unwrap();
        assert_eq!(g, p.loss_grad(&x, &Batch::All).unwrap());
        assert_eq!(st.grad_evals, 60);
        let y = vec![0.1; 10];
        let _ = st.stochastic_gradient(&p, &y, 1).unwrap();
        assert_eq!(st.grad_evals, 72);
        let _ = st.stochastic_gradient(&p, &y, 5).unwrap();
        assert_eq!(st.anchor().unwrap().0, y.as_slice());
        assert_eq!(st.grad_evals, 132);
    }

    #[test]
    fn hessian_operator_reuses_its_batch() {
        let p = problem(50);
        let mut st = OracleState::new(
            OracleConfig {
                hess_size0: 5,
                hess_cap: 5,
                seed: 9,
                ..Default::default()
            },
            50,
        )
        .unwrap();
        let x = vec![0.1; 10];
        let (op, batch) = st.stochastic_hess_operator(&p, &x).unwrap();
        let v = vec![1.0; 10];
        assert_eq!(op.apply_vec(&v), op.apply_vec(&v));
        assert_eq!(op.apply_vec(&v), p.loss_hess_vec(&x, &batch, &v).unwrap());
        st.charge_hessian(&batch, 3);
        assert_eq!(st.hess_evals, 15);
        assert!(op.apply_vec(&[0.0; 10]).iter().all(|&z| z == 0.0));
    }

    fn example_params(varpi: f64) -> ScheduleParams {
        ScheduleParams {
            delta: SeqRule::power(0.5, 8.0),
            sigma_bar: 1.0,
            rho_bar: 1.0,
            lambda_m: 1.0,
            gamma_f: 0.1,
            gamma_eta: 0.5,
            dim: 10,
            eps1: SeqRule::power(1.0, 2.0 + varpi / 4.0),
            eps2: SeqRule::power(1.0, 1.0 + varpi / 8.0),
            p: 0.5,
            lf_c: 1.0,
            ell_bar: 1,
            gamma_seq: SeqRule::power(0.9, 0.1),
            rho_seq: SeqRule::power(1.0, 1.0),
        }
    }

    #[test]
    fn worked_example_growth_rate() {
        // n_g / (k^(4 + varpi/2) log k) stays within constants, hence n_g is
        // O(k^(4 + varpi) log k)
        let varpi = 0.5;
        let sp = example_params(varpi);
        let mut last = 0;
        let mut ratios = Vec::new();
        for k in 3..200 {
            let (ng, _) = theoretical_schedule(&sp, k, ScheduleMode::LightTail).unwrap();
            assert!(ng >= last);
            last = ng;
            let kf = k as f64;
            ratios.push(ng as f64 / (kf.powf(4.0 + varpi / 2.0) * kf.ln()));
        }
        let hi = ratios.iter().cloned().fold(0.0, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(hi / lo < 2.0, "{lo} .. {hi}");
    }

    #[test]
    fn light_tail_needs_fewer_hessian_samples() {
        let sp = ScheduleParams {
            delta: SeqRule::Constant { value: 1e-4 },
            ..example_params(0.5)
        };
        let (_, nh_g) = theoretical_schedule(&sp, 5, ScheduleMode::Global).unwrap();
        let (_, nh_l) = theoretical_schedule(&sp, 5, ScheduleMode::LightTail).unwrap();
        assert!(nh_l < nh_g);
    }

    #[test]
    fn gamma_attains_mu_of_one() {
        let sp = ScheduleParams {
            eps1: SeqRule::Constant { value: 1.0 },
            eps2: SeqRule::Constant { value: 1.0 },
            lf_c: 50.0,
            ..example_params(0.5)
        };
        assert_eq!(gamma_k(&sp, 3, ScheduleMode::Global), 1.0 / 100.0);
    }

    #[test]
    fn rate_modes_are_monotone() {
        let sp = example_params(0.5);
        for mode in [ScheduleMode::Linear, ScheduleMode::Superlinear] {
            let mut last = (0, 0);
            for k in 1..15 {
                let s = theoretical_schedule(&sp, k, mode).unwrap();
                assert!(s.0 >= last.0 && s.1 >= last.1, "{mode:?} k = {k}");
                last = s;
            }
        }
    }

    #[test]
    fn degenerate_sequences_are_rejected() {
        let sp = ScheduleParams {
            eps1: SeqRule::Zero,
            ..example_params(0.5)
        };
        assert!(matches!(
            theoretical_schedule(&sp, 3, ScheduleMode::Global),
            Err(Error::DegenerateSchedule(_))
        ));
        assert!(theoretical_schedule(&example_params(0.5), 0, ScheduleMode::Global).is_err());
    }

    #[test]
    fn kappa_values() {
        assert!((kappa(8) - (2.0 * 10f64.ln() - 1.0) * std::f64::consts::E).abs() < 1e-15);
        assert!(kappa(1) > 0.0);
    }
}
