use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(pred - target)^2`
pub fn squared_log_loss(pred_log: f64, target_log: f64) -> f64 {
    let d = pred_log - target_log;
    d * d
}

/// Non-negative pinball loss; its minimizer over a sample is the
/// `xi`-quantile of the targets.
pub fn pinball_loss(pred_log: f64, target_log: f64, xi: f64) -> Result<f64> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::validation(format!(
            "target quantile must be in (0, 1), got {xi}"
        )));
    }
    Ok(pinball(pred_log - target_log, xi).0)
}

/// Derivative of [`pinball_loss`] with respect to the prediction; 0 at the kink.
pub fn pinball_gradient(pred_log: f64, target_log: f64, xi: f64) -> Result<f64> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(Error::validation(format!(
            "target quantile must be in (0, 1), got {xi}"
        )));
    }
    Ok(pinball(pred_log - target_log, xi).1)
}

/// Squared relative error in linear runtime space, `((C_hat - C) / C)^2`.
pub fn proportional_loss(pred_log: f64, target_log: f64) -> f64 {
    proportional(pred_log - target_log).0
}

/// Loss and derivative with respect to the prediction for `d = pred - target`.
pub(crate) fn pinball(d: f64, xi: f64) -> (f64, f64) {
    if d < 0.0 {
        (-xi * d, -xi)
    } else if d > 0.0 {
        ((1.0 - xi) * d, 1.0 - xi)
    } else {
        // subgradient 0 at the kink
        (0.0, 0.0)
    }
}

pub(crate) fn squared(d: f64) -> (f64, f64) {
    (d * d, 2.0 * d)
}

pub(crate) fn proportional(d: f64) -> (f64, f64) {
    let ratio = d.exp();
    let e = ratio - 1.0;
    (e * e, 2.0 * e * ratio)
}

/// Loss used by the single head in mean mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanLoss {
    /// Squared error in log space.
    #[default]
    Squared,
    /// Squared relative error in linear space.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Total weight `beta` of the interference objectives, split equally
    /// across 1, 2 and 3 interferers. Isolated runs have weight 1.
    pub interference_weight: f64,
    pub mean_loss: MeanLoss,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            interference_weight: 0.5,
            mean_loss: MeanLoss::Squared,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.interference_weight.is_finite() || self.interference_weight < 0.0 {
            return Err(Error::validation(format!(
                "interference_weight must be finite and >= 0, got {}",
                self.interference_weight
            )));
        }
        Ok(())
    }

    pub fn mode_weight(&self, mode: usize) -> f64 {
        if mode == 0 {
            1.0
        } else {
            self.interference_weight / crate::dataset::MAX_INTERFERERS as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_examples() {
        assert_eq!(squared_log_loss(1.0, 1.0), 0.0);
        assert_eq!(squared_log_loss(2.0, 1.0), 1.0);
        assert_eq!(squared_log_loss(0.0, 3.0), 9.0);
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(0.4, 0.4, 0.3).unwrap(), 0.0);
        assert!((pinball_loss(0.0, 1.0, 0.9).unwrap() - 0.9).abs() < 1e-15);
        assert!((pinball_loss(1.0, 0.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!(pinball_loss(0.0, 1.0, 1.0).is_err());
        assert!(pinball_loss(0.0, 1.0, 0.0).is_err());
        assert_eq!(pinball(0.0, 0.7).1, 0.0);
    }

    #[test]
    fn pinball_gradient_sides() {
        assert_eq!(pinball_gradient(0.0, 1.0, 0.9).unwrap(), -0.9);
        assert!((pinball_gradient(1.0, 0.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(pinball_gradient(1.0, 1.0, 0.9).unwrap(), 0.0);
        assert!(pinball_gradient(0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn pinball_minimizer_is_empirical_quantile() {
        // brute-force scan of candidate predictions over the sample {1..100}
        let sample: Vec<f64> = (1..=100).map(f64::from).collect();
        let mean_loss = |c: f64| sample.iter().map(|&t| pinball_loss(c, t, 0.95).unwrap()).sum::<f64>() / 100.0;
        let best = (0..=10_000)
            .map(|k| k as f64 * 0.01 + 0.5)
            .min_by(|a, b| mean_loss(*a).partial_cmp(&mean_loss(*b)).unwrap())
            .unwrap();
        assert!((best - 95.0).abs() <= 1.0, "{best}");
    }

    #[test]
    fn proportional_examples() {
        assert_eq!(proportional_loss(0.3, 0.3), 0.0);
        // prediction twice the runtime: relative error 1
        assert!((proportional_loss(2f64.ln(), 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mode_weights() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.mode_weight(0), 1.0);
        let total: f64 = (1..=3).map(|m| cfg.mode_weight(m)).sum();
        assert!((total - 0.5).abs() < 1e-15);
    }
}
