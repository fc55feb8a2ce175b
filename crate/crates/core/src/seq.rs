//! Parameter sequences indexed by the iteration counter.

use serde::{Deserialize, Serialize};

/// A nonnegative sequence `k -> value`.
///
/// Power rules are evaluated at `max(k, 1)` so that `c * k^-q` is finite at `k = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SeqRule {
    Zero,
    Constant { value: f64 },
    /// `c * k^(-q)`
    Power { c: f64, q: f64 },
    /// `c * r^k`
    Geometric { c: f64, r: f64 },
}

impl SeqRule {
    pub fn power(c: f64, q: f64) -> Self {
        SeqRule::Power { c, q }
    }

    pub fn at(&self, k: usize) -> f64 {
        match *self {
            SeqRule::Zero => 0.0,
            SeqRule::Constant { value } => value,
            SeqRule::Power { c, q } => c * (k.max(1) as f64).powf(-q),
            SeqRule::Geometric { c, r } => c * r.powi(k.min(i32::MAX as usize) as i32),
        }
    }

    /// Whether `sum_k value(k)^p` is finite.
    pub fn is_p_summable(&self, p: f64) -> bool {
        match *self {
            SeqRule::Zero => true,
            SeqRule::Constant { value } => value == 0.0,
            SeqRule::Power { c, q } => c == 0.0 || q * p > 1.0,
            SeqRule::Geometric { c, r } => c == 0.0 || r.abs() < 1.0,
        }
    }

    pub fn is_summable(&self) -> bool {
        self.is_p_summable(1.0)
    }

    pub fn is_nonnegative(&self) -> bool {
        match *self {
            SeqRule::Zero => true,
            SeqRule::Constant { value } => value >= 0.0,
            SeqRule::Power { c, .. } => c >= 0.0,
            SeqRule::Geometric { c, r } => c >= 0.0 && r >= 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_rule_is_finite_at_zero() {
        let s = SeqRule::power(500.0, 1.1);
        assert_eq!(s.at(0), 500.0);
        assert_eq!(s.at(1), 500.0);
        assert!((s.at(10) - 500.0 * 10f64.powf(-1.1)).abs() < 1e-12);
    }

    #[test]
    fn summability_exponents() {
        assert!(SeqRule::power(1.0, 1.1).is_summable());
        assert!(!SeqRule::power(1.0, 1.0).is_summable());
        assert!(SeqRule::power(1.0, 2.25).is_p_summable(0.5));
        assert!(!SeqRule::power(1.0, 1.5).is_p_summable(0.5));
        assert!(SeqRule::Geometric { c: 1.0, r: 0.5 }.is_summable());
        assert!(!SeqRule::Constant { value: 0.1 }.is_summable());
    }
}
