//! Soft-thresholding under the scalar metric `Lambda = (1/lambda) I`, the
//! natural residual, and the generalized Jacobian of the prox.

use crate::error::{invalid, Result};
use crate::linalg::dot;

/// Scalar prox metric `Lambda = (1/lambda) I`, so `Lambda^{-1} g = lambda g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxMetric {
    lambda: f64,
}

impl ProxMetric {
    pub fn new(lambda: f64) -> Result<Self> {
        if lambda > 0.0 && lambda.is_finite() {
            Ok(Self { lambda })
        } else {
            Err(invalid(format!("metric scalar must be positive, got {lambda}")))
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// `sign(u) * max(|u| - t, 0)` componentwise.
pub fn prox_l1(u: &[f64], threshold: f64) -> Vec<f64> {
    debug_assert!(threshold >= 0.0);
    u.iter().map(|&v| shrink(v, threshold)).collect()
}

#[inline]
pub fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// The residual `F = x - prox(u, mu*lambda)` together with `u = x - lambda g`
/// and `p = prox(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub f: Vec<f64>,
}

pub fn residual(x: &[f64], g: &[f64], metric: ProxMetric, mu: f64) -> Residual {
    let lam = metric.lambda();
    let u: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - lam * gi).collect();
    let p = prox_l1(&u, mu * lam);
    let f = x.iter().zip(&p).map(|(xi, pi)| xi - pi).collect();
    Residual { u, p, f }
}

/// Diagonal of the generalized Jacobian of the prox at `u`: `|u_i| > t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JacobianMask {
    pub active: Vec<bool>,
}

impl JacobianMask {
    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }
}

pub fn jacobian_mask(u: &[f64], threshold: f64) -> JacobianMask {
    JacobianMask {
        active: u.iter().map(|v| v.abs() > threshold).collect(),
    }
}

/// `sqrt(<v, v> / lambda)`
pub fn scaled_norm(v: &[f64], metric: ProxMetric) -> f64 {
    (dot(v, v) / metric.lambda()).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, sub};
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(prox_l1(&[0.5, -0.1], 0.2), vec![0.3, 0.0]);
        let u = [1.5, -2.0, 0.0];
        assert_eq!(prox_l1(&u, 0.0), u.to_vec());
    }

    #[test]
    fn residual_without_regularizer_is_scaled_gradient() {
        let m = ProxMetric::new(0.25).unwrap();
        let r = residual(&[1.0, 2.0], &[4.0, -8.0], m, 0.0);
        assert_eq!(r.f, vec![1.0, -2.0]);
    }

    #[test]
    fn residual_vanishes_at_analytic_minimizer() {
        // f = (x-1)^2/2, mu = 0.1: x* = 0.9
        for lam in [0.01, 0.1, 1.0, 7.0] {
            let m = ProxMetric::new(lam).unwrap();
            let x = 0.9;
            let r = residual(&[x], &[x - 1.0], m, 0.1);
            assert!(r.f[0].abs() < 1e-15, "{lam}: {}", r.f[0]);
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(
            jacobian_mask(&[0.5, -0.1, 0.2], 0.2).active,
            vec![true, false, false]
        );
        assert_eq!(jacobian_mask(&[1.0, -3.0], 0.0).count_active(), 2);
    }

    #[test]
    fn scaled_norm_examples() {
        let one = ProxMetric::new(1.0).unwrap();
        assert_eq!(scaled_norm(&[3.0, 4.0], one), 5.0);
        assert_eq!(scaled_norm(&[0.0, 0.0], ProxMetric::new(3.0).unwrap()), 0.0);
        assert!(ProxMetric::new(0.0).is_err());
        assert!(ProxMetric::new(-1.0).is_err());
    }

    proptest! {
        #[test]
        fn firmly_nonexpansive(
            x in prop::collection::vec(-5.0f64..5.0, 6),
            y in prop::collection::vec(-5.0f64..5.0, 6),
            lam in 1e-3f64..1e3,
            mu in 0.0f64..2.0,
        ) {
            let m = ProxMetric::new(lam).unwrap();
            let px = prox_l1(&x, mu * lam);
            let py = prox_l1(&y, mu * lam);
            let dp = sub(&px, &py);
            let dx = sub(&x, &y);
            let lhs = dot(&dp, &dp) / lam;
            let rhs = dot(&dp, &dx) / lam;
            prop_assert!(lhs <= rhs + 1e-12 * rhs.abs().max(1.0));
            prop_assert!(scaled_norm(&dp, m) <= scaled_norm(&dx, m) * (1.0 + 1e-12) + 1e-15);
        }

        #[test]
        fn optimality_multiplier(
            u in prop::collection::vec(-5.0f64..5.0, 8),
            lam in 1e-3f64..1e2,
            mu in 0.0f64..2.0,
        ) {
            let p = prox_l1(&u, mu * lam);
            for (ui, pi) in u.iter().zip(&p) {
                let w = (ui - pi) / lam;
                prop_assert!(w.abs() <= mu * (1.0 + 1e-12) + 1e-12);
                if *pi != 0.0 {
                    prop_assert!((w - mu * pi.signum()).abs() <= 1e-9 * mu.max(1.0));
                }
            }
        }

        #[test]
        fn scaled_norm_is_homogeneous(
            v in prop::collection::vec(-5.0f64..5.0, 5),
            c in -10.0f64..10.0,
            lam in 1e-3f64..1e3,
        ) {
            let m = ProxMetric::new(lam).unwrap();
            let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
            let a = scaled_norm(&cv, m);
            let b = c.abs() * scaled_norm(&v, m);
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
        }

        #[test]
        fn mask_is_derivative_of_prox(
            u in prop::collection::vec(-3.0f64..3.0, 6),
            t in 0.0f64..1.0,
        ) {
            let mask = jacobian_mask(&u, t);
            let h = 1e-7;
            for (i, &ui) in u.iter().enumerate() {
                if (ui.abs() - t).abs() < 1e-4 {
                    continue;
                }
                let d = (shrink(ui + h, t) - shrink(ui - h, t)) / (2.0 * h);
                let expect = if mask.active[i] { 1.0 } else { 0.0 };
                prop_assert!((d - expect).abs() < 1e-6);
            }
        }

        #[test]
        fn residual_is_lipschitz(
            x in prop::collection::vec(-3.0f64..3.0, 4),
            y in prop::collection::vec(-3.0f64..3.0, 4),
            lam in 1e-2f64..1e1,
        ) {
            // f = (L/2)||x||^2; with lambda_m = lambda_M = 1/lam the modulus is 2 + L*lam.
            let l = 2.0;
            let m = ProxMetric::new(lam).unwrap();
            let gx: Vec<f64> = x.iter().map(|v| l * v).collect();
            let gy: Vec<f64> = y.iter().map(|v| l * v).collect();
            let fx = residual(&x, &gx, m, 0.3).f;
            let fy = residual(&y, &gy, m, 0.3).f;
            let lf = 2.0 + l * lam;
            prop_assert!(norm(&sub(&fx, &fy)) <= lf * norm(&sub(&x, &y)) + 1e-12);
        }
    }
}
