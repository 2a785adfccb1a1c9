//! Metrics, experiment grids over training fractions and replicates, and
//! plot-ready aggregation.

mod experiment;
mod export;
mod summary;

pub use experiment::{
    fit_model, prepare_inputs, run_experiment, run_single, score_bounds, score_mean, BoundScores, EpsilonMetrics,
    ExperimentSpec, InterferenceMode, MeanScores, Objective, RunOutput, RunReport, RunStatus,
};
pub use export::{export_embeddings, interference_norms};
pub use summary::{load_report, summarize, write_run};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean absolute percent error, as a fraction.
pub fn mape(predictions: &[f64], actuals: &[f64]) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::validation(format!(
            "{} predictions but {} actual runtimes",
            predictions.len(),
            actuals.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::validation("no runtimes to compare"));
    }
    if actuals.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::validation("actual runtimes must be positive and finite"));
    }
    let sum: f64 = predictions.iter().zip(actuals).map(|(p, a)| (p - a).abs() / a).sum();
    Ok(sum / actuals.len() as f64)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateStats {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl ReplicateStats {
    /// `None` for an empty sample. A single value has zero standard error.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Some(ReplicateStats { mean, stderr, n })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mape(&[1.1], &[1.0]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(mape(&[2.0, 0.5], &[1.0, 1.0]).unwrap(), 0.75);
        assert!(mape(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mape(&[1.0], &[-1.0]).is_err());
    }

    #[test]
    fn stats() {
        let s = ReplicateStats::from_values(&[0.2; 5]).unwrap();
        assert_eq!((s.mean, s.stderr), (0.2, 0.0));
        let s = ReplicateStats::from_values(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        // sample std sqrt(2.5), divided by sqrt(5)
        assert!((s.stderr - (2.5f64 / 5.0).sqrt()).abs() < 1e-15);
        assert!(ReplicateStats::from_values(&[]).is_none());
    }
}
