use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_baseline, BaselineModel, DEFAULT_MAX_SWEEPS, DEFAULT_TOL};
use crate::conformal::{
    build_calibration, default_epsilons, empirical_coverage, overprovisioning_margin, CalibrationTable,
};
use crate::dataset::{make_split, Dataset, Split, MAX_INTERFERERS};
use crate::error::{Error, Result};
use crate::format::fmt_f64;
use crate::linalg::Matrix;
use crate::model::{init_model, NetworkConfig, RuntimeModel};
use crate::training::{train, LossConfig, MeanLoss, TrainConfig, TrainOutcome};

use super::mape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Regress log-residuals of the fitted baseline.
    #[default]
    LogResidual,
    /// Regress log runtimes directly, without a baseline.
    Log,
    /// Squared relative error in linear space on top of the baseline.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterferenceMode {
    #[default]
    Model,
    /// Train only on isolated runs.
    Discard,
    /// Train on every run as if it were isolated.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Free-form name carried into reports and summary tables.
    pub label: String,
    pub train_fractions: Vec<f64>,
    pub replicates: usize,
    /// Replicate `r` uses seed `seed + r` for its split, initialization and batches.
    pub seed: u64,
    pub objective: Objective,
    pub use_workload_features: bool,
    pub use_platform_features: bool,
    pub interference: InterferenceMode,
    /// Architecture shared by both models; `mean_mode` is set per model.
    pub network: NetworkConfig,
    /// `seed` is ignored; each replicate derives its own.
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub epsilons: Vec<f64>,
    /// Train the single-head model used for MAPE.
    pub mean_model: bool,
    /// Train the quantile model used for bounds.
    pub quantile_model: bool,
    pub baseline_max_sweeps: usize,
    pub baseline_tol: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            label: "default".to_string(),
            train_fractions: (1..=9).map(|k| k as f64 / 10.0).collect(),
            replicates: 5,
            seed: 0,
            objective: Objective::LogResidual,
            use_workload_features: true,
            use_platform_features: true,
            interference: InterferenceMode::Model,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            epsilons: default_epsilons(),
            mean_model: true,
            quantile_model: true,
            baseline_max_sweeps: DEFAULT_MAX_SWEEPS,
            baseline_tol: DEFAULT_TOL,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_fractions.is_empty() {
            return Err(Error::validation("at least one training fraction is required"));
        }
        if let Some(f) = self.train_fractions.iter().find(|&&f| !(f > 0.0 && f < 1.0)) {
            return Err(Error::validation(format!(
                "training fractions must be in (0, 1), got {f}"
            )));
        }
        if self.replicates == 0 {
            return Err(Error::validation("replicates must be at least 1"));
        }
        if !self.mean_model && !self.quantile_model {
            return Err(Error::validation("enable the mean model, the quantile model, or both"));
        }
        if let Some(e) = self.epsilons.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
            return Err(Error::validation(format!("epsilon must be in (0, 1), got {e}")));
        }
        if self.quantile_model && self.epsilons.is_empty() {
            return Err(Error::validation("the quantile model needs at least one epsilon"));
        }
        let mut quantile = self.network.clone();
        quantile.mean_mode = !self.quantile_model;
        quantile.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    fn network_for(&self, mean_mode: bool) -> NetworkConfig {
        let mut net = self.network.clone();
        net.mean_mode = mean_mode;
        if self.interference != InterferenceMode::Model {
            net.interference_types = 0;
        }
        net
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Bound quality on the test set at one miscoverage rate, for one pool or
/// for all pools with a feasible bound (`pool = "all"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonMetrics {
    pub epsilon: f64,
    pub pool: String,
    pub n: usize,
    pub margin: Option<f64>,
    pub coverage: Option<f64>,
}

/// Test-set metrics of one (fraction, replicate) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub train_fraction: f64,
    pub replicate: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub n_train: usize,
    pub n_calval: usize,
    pub n_test: usize,
    pub mape_no_interference: Option<f64>,
    pub mape_interference: Option<f64>,
    /// Indexed by number of interferers.
    pub mape_by_pool: Vec<Option<f64>>,
    pub bounds: Vec<EpsilonMetrics>,
}

impl RunReport {
    fn new(spec: &ExperimentSpec, train_fraction: f64, replicate: usize) -> Self {
        RunReport {
            label: spec.label.clone(),
            train_fraction,
            replicate,
            seed: spec.seed.wrapping_add(replicate as u64),
            status: RunStatus::Ok,
            error: None,
            n_train: 0,
            n_calval: 0,
            n_test: 0,
            mape_no_interference: None,
            mape_interference: None,
            mape_by_pool: vec![None; MAX_INTERFERERS + 1],
            bounds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub split: Option<Split>,
    pub mean_model: Option<RuntimeModel>,
    pub quantile_model: Option<RuntimeModel>,
    pub calibration: Option<CalibrationTable>,
    /// Per test observation: pool, actual runtime, mean prediction and bounds.
    pub predictions_csv: String,
}

/// Network inputs for the chosen feature flags. Disabled features are
/// replaced by a one-hot identity. Platform features are standardized per
/// column over all platforms.
pub fn prepare_inputs(dataset: &Dataset, spec: &ExperimentSpec) -> (Matrix, Matrix) {
    let workload = if spec.use_workload_features {
        dataset.features.workload_features.clone()
    } else {
        Matrix::identity(dataset.n_workloads())
    };
    let platform = if spec.use_platform_features {
        standardize_columns(&dataset.features.platform_features)
    } else {
        Matrix::identity(dataset.n_platforms())
    };
    (workload, platform)
}

fn standardize_columns(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    let n = m.rows() as f64;
    for c in 0..m.cols() {
        let mean = (0..m.rows()).map(|r| m[(r, c)]).sum::<f64>() / n;
        let var = (0..m.rows()).map(|r| (m[(r, c)] - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        for r in 0..m.rows() {
            out[(r, c)] = if sd > 0.0 { (m[(r, c)] - mean) / sd } else { 0.0 };
        }
    }
    out
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Baseline, inputs and training view for one model, then train it.
///
/// `mean_mode` picks the single-head model (init and batch streams 1, 2) or
/// the quantile model (streams 3, 4) derived from `seed`.
pub fn fit_model(
    dataset: &Dataset,
    split: &Split,
    spec: &ExperimentSpec,
    mean_mode: bool,
    seed: u64,
) -> Result<TrainOutcome> {
    let baseline = match spec.objective {
        Objective::Log => BaselineModel::zeros(dataset.n_workloads(), dataset.n_platforms()),
        Objective::LogResidual | Objective::Proportional => {
            fit_baseline(dataset, &split.train, spec.baseline_max_sweeps, spec.baseline_tol)?
        }
    };
    let (workload_inputs, platform_inputs) = prepare_inputs(dataset, spec);

    // Training view of the data for the interference ablations.
    let ignored;
    let (train_data, train_split) = match spec.interference {
        InterferenceMode::Model => (dataset, split.clone()),
        InterferenceMode::Ignore => {
            let mut d = dataset.clone();
            d.observations.iter_mut().for_each(|o| o.interference.clear());
            ignored = d;
            (&ignored, split.clone())
        }
        InterferenceMode::Discard => {
            let isolated = |ids: &[usize]| -> Vec<usize> {
                ids.iter()
                    .copied()
                    .filter(|&id| dataset.observations[id].mode() == 0)
                    .collect()
            };
            let s = Split {
                train: isolated(&split.train),
                calval: isolated(&split.calval),
                ..split.clone()
            };
            if s.train.is_empty() || s.calval.is_empty() {
                return Err(Error::validation(
                    "no isolated observations left after discarding interference",
                ));
            }
            (dataset, s)
        }
    };

    let loss = if mean_mode {
        LossConfig {
            mean_loss: if spec.objective == Objective::Proportional {
                MeanLoss::Proportional
            } else {
                MeanLoss::Squared
            },
            ..spec.loss.clone()
        }
    } else {
        spec.loss.clone()
    };
    let stream = if mean_mode { 1 } else { 3 };
    let model = init_model(
        spec.network_for(mean_mode),
        workload_inputs,
        platform_inputs,
        baseline,
        derive_seed(seed, stream),
    )?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, stream + 1),
        ..spec.train.clone()
    };
    train(train_data, &train_split, model, &cfg, &loss)
}

/// Test MAPE of a single-head model, overall and per pool.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanScores {
    /// Predicted runtimes in the order of the scored ids.
    pub predictions: Vec<f64>,
    pub no_interference: Option<f64>,
    pub interference: Option<f64>,
    pub by_pool: Vec<Option<f64>>,
}

pub fn score_mean(model: &RuntimeModel, dataset: &Dataset, ids: &[usize]) -> Result<MeanScores> {
    let obs: Vec<_> = ids.iter().map(|&id| &dataset.observations[id]).collect();
    let queries: Vec<(usize, usize, &[usize])> = obs
        .iter()
        .map(|o| (o.workload, o.platform, o.interference.as_slice()))
        .collect();
    let predictions: Vec<f64> = if obs.is_empty() {
        Vec::new()
    } else {
        let heads = model.forward_heads(&queries)?;
        (0..heads.rows()).map(|n| heads.row(n)[0].exp()).collect()
    };
    let subset = |keep: &dyn Fn(usize) -> bool| -> Result<Option<f64>> {
        let (p, a): (Vec<f64>, Vec<f64>) = obs
            .iter()
            .zip(&predictions)
            .filter(|(o, _)| keep(o.mode()))
            .map(|(o, &p)| (p, o.runtime))
            .unzip();
        if a.is_empty() {
            Ok(None)
        } else {
            mape(&p, &a).map(Some)
        }
    };
    let mut by_pool = vec![None; MAX_INTERFERERS + 1];
    for (pool, slot) in by_pool.iter_mut().enumerate() {
        *slot = subset(&|m| m == pool)?;
    }
    Ok(MeanScores {
        no_interference: subset(&|m| m == 0)?,
        interference: subset(&|m| m > 0)?,
        by_pool,
        predictions,
    })
}

/// Calibrated bounds on scored observations and their quality.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundScores {
    /// Per epsilon: one entry per non-empty pool, then `"all"`.
    pub metrics: Vec<EpsilonMetrics>,
    /// `[epsilon][observation]`; `None` where the pool has no feasible bound.
    pub bounds: Vec<Vec<Option<f64>>>,
}

pub fn score_bounds(
    model: &RuntimeModel,
    table: &CalibrationTable,
    dataset: &Dataset,
    ids: &[usize],
    epsilons: &[f64],
) -> Result<BoundScores> {
    let obs: Vec<_> = ids.iter().map(|&id| &dataset.observations[id]).collect();
    let mut out = BoundScores {
        metrics: Vec::new(),
        bounds: Vec::new(),
    };
    if obs.is_empty() {
        return Ok(out);
    }
    let queries: Vec<(usize, usize, &[usize])> = obs
        .iter()
        .map(|o| (o.workload, o.platform, o.interference.as_slice()))
        .collect();
    let preds = model.forward_heads(&queries)?;
    for &eps in epsilons {
        table.epsilon_index(eps)?;
        let mut column = vec![None; obs.len()];
        for (n, o) in obs.iter().enumerate() {
            if let Ok(rule) = table.rule(o.mode(), eps) {
                column[n] = Some((preds.row(n)[rule.head] + rule.offset).exp());
            }
        }
        let mut all = (Vec::new(), Vec::new());
        for pool in 0..=MAX_INTERFERERS {
            let (mut b, mut a) = (Vec::new(), Vec::new());
            let mut n_pool = 0;
            for (n, o) in obs.iter().enumerate() {
                if o.mode() == pool {
                    n_pool += 1;
                    if let Some(bound) = column[n] {
                        b.push(bound);
                        a.push(o.runtime);
                    }
                }
            }
            if n_pool == 0 {
                continue;
            }
            out.metrics.push(bound_metrics(eps, pool.to_string(), n_pool, &b, &a)?);
            all.0.extend(b);
            all.1.extend(a);
        }
        let n_all = all.0.len();
        out.metrics
            .push(bound_metrics(eps, "all".to_string(), n_all, &all.0, &all.1)?);
        out.bounds.push(column);
    }
    Ok(out)
}

/// Split, fit, train, calibrate and score one replicate. Test observations
/// are only read when scoring.
pub fn run_single(
    dataset: &Dataset,
    spec: &ExperimentSpec,
    train_fraction: f64,
    replicate: usize,
) -> Result<RunOutput> {
    spec.validate()?;
    let mut report = RunReport::new(spec, train_fraction, replicate);
    let seed = report.seed;
    let split = make_split(dataset, train_fraction, seed)?;
    report.n_train = split.train.len();
    report.n_calval = split.calval.len();
    report.n_test = split.test.len();

    let mut mean_model = None;
    let mut mean_preds = None;
    if spec.mean_model {
        let model = fit_model(dataset, &split, spec, true, seed)?.best;
        if !split.test.is_empty() {
            let scores = score_mean(&model, dataset, &split.test)?;
            report.mape_no_interference = scores.no_interference;
            report.mape_interference = scores.interference;
            report.mape_by_pool = scores.by_pool;
            mean_preds = Some(scores.predictions);
        }
        mean_model = Some(model);
    }

    let mut quantile_model = None;
    let mut calibration = None;
    let mut bound_columns: Vec<Vec<Option<f64>>> = Vec::new();
    if spec.quantile_model {
        let model = fit_model(dataset, &split, spec, false, seed)?.best;
        // Pools follow the true number of interferers even when the model ignores them.
        let table = build_calibration(&model, dataset, &split.calval, &spec.epsilons)?;
        let scores = score_bounds(&model, &table, dataset, &split.test, &spec.epsilons)?;
        report.bounds = scores.metrics;
        bound_columns = scores.bounds;
        calibration = Some(table);
        quantile_model = Some(model);
    }

    let test_obs: Vec<(usize, f64)> = split
        .test
        .iter()
        .map(|&id| (dataset.observations[id].mode(), dataset.observations[id].runtime))
        .collect();
    let predictions_csv = predictions_csv(
        &split.test,
        &test_obs,
        mean_preds.as_deref(),
        if spec.quantile_model { &spec.epsilons } else { &[] },
        &bound_columns,
    );
    Ok(RunOutput {
        report,
        split: Some(split),
        mean_model,
        quantile_model,
        calibration,
        predictions_csv,
    })
}

fn bound_metrics(epsilon: f64, pool: String, n: usize, bounds: &[f64], actuals: &[f64]) -> Result<EpsilonMetrics> {
    let (margin, coverage) = if bounds.is_empty() {
        (None, None)
    } else {
        (
            Some(overprovisioning_margin(bounds, actuals)?),
            Some(empirical_coverage(bounds, actuals)?),
        )
    };
    Ok(EpsilonMetrics {
        epsilon,
        pool,
        n,
        margin,
        coverage,
    })
}

fn predictions_csv(
    ids: &[usize],
    obs: &[(usize, f64)],
    mean: Option<&[f64]>,
    epsilons: &[f64],
    bounds: &[Vec<Option<f64>>],
) -> String {
    let mut out = String::from("observation,pool,actual,mean_prediction");
    for e in epsilons {
        out.push_str(&format!(",bound_{e}"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for (n, (&id, &(pool, actual))) in ids.iter().zip(obs).enumerate() {
        out.push_str(&format!("{id},{pool},{},{}", fmt_f64(actual), opt(mean.map(|m| m[n]))));
        for column in bounds {
            out.push(',');
            out.push_str(&opt(column[n]));
        }
        out.push('\n');
    }
    out
}

/// Every (fraction, replicate) pair, run on `jobs` threads. Output order is
/// fraction-major and independent of `jobs`; a failed run is reported with
/// its error instead of aborting the grid.
pub fn run_experiment(dataset: &Dataset, spec: &ExperimentSpec, jobs: usize) -> Result<Vec<RunOutput>> {
    spec.validate()?;
    let grid: Vec<(f64, usize)> = spec
        .train_fractions
        .iter()
        .flat_map(|&f| (0..spec.replicates).map(move |r| (f, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker threads: {e}")))?;
    let outputs = pool.install(|| {
        grid.par_iter()
            .map(|&(f, r)| {
                run_single(dataset, spec, f, r).unwrap_or_else(|e| {
                    let mut report = RunReport::new(spec, f, r);
                    report.status = RunStatus::Failed;
                    report.error = Some(e.to_string());
                    RunOutput {
                        report,
                        split: None,
                        mean_model: None,
                        quantile_model: None,
                        calibration: None,
                        predictions_csv: String::new(),
                    }
                })
            })
            .collect()
    });
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticConfig};

    fn data() -> Dataset {
        let cfg = SyntheticConfig {
            n_workloads: 8,
            n_platforms: 5,
            obs_per_mode: 50,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg, 2).unwrap().0
    }

    fn spec() -> ExperimentSpec {
        ExperimentSpec {
            train_fractions: vec![0.5],
            replicates: 2,
            network: NetworkConfig {
                hidden_sizes: vec![8],
                embed_dim: 3,
                quantiles: vec![0.5, 0.9],
                ..NetworkConfig::default()
            },
            train: TrainConfig {
                steps: 20,
                batch_per_mode: 16,
                eval_every: 10,
                ..TrainConfig::default()
            },
            epsilons: vec![0.2, 0.1],
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn disabled_features_become_one_hot() {
        let d = data();
        let s = ExperimentSpec {
            use_workload_features: false,
            use_platform_features: false,
            ..spec()
        };
        let (w, p) = prepare_inputs(&d, &s);
        assert_eq!(w, Matrix::identity(8));
        assert_eq!(p, Matrix::identity(5));
    }

    #[test]
    fn platform_features_are_standardized() {
        let (_, p) = prepare_inputs(&data(), &spec());
        for c in 0..p.cols() {
            let mean: f64 = (0..p.rows()).map(|r| p[(r, c)]).sum::<f64>() / p.rows() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn reports_are_complete_and_deterministic() {
        let d = data();
        let a = run_experiment(&d, &spec(), 2).unwrap();
        let b = run_experiment(&d, &spec(), 1).unwrap();
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.report, y.report);
            assert_eq!(x.predictions_csv, y.predictions_csv);
        }
        let r = &a[0].report;
        assert_eq!(r.status, RunStatus::Ok);
        assert!(r.mape_no_interference.is_some() && r.mape_interference.is_some());
        assert!(r.bounds.iter().any(|m| m.pool == "all" && m.epsilon == 0.1));
        assert_eq!(a[0].predictions_csv.lines().count(), r.n_test + 1);
        assert_ne!(a[0].report.seed, a[1].report.seed);
    }

    #[test]
    fn failed_runs_are_recorded() {
        let d = data();
        let s = ExperimentSpec {
            train_fractions: vec![0.001],
            replicates: 1,
            ..spec()
        };
        let out = run_experiment(&d, &s, 1).unwrap();
        assert_eq!(out[0].report.status, RunStatus::Failed);
        assert!(out[0].report.error.is_some());
    }

    #[test]
    fn ablations_use_interference_free_models() {
        let d = data();
        for mode in [InterferenceMode::Discard, InterferenceMode::Ignore] {
            let s = ExperimentSpec {
                interference: mode,
                replicates: 1,
                ..spec()
            };
            let out = run_single(&d, &s, 0.5, 0).unwrap();
            assert_eq!(out.mean_model.unwrap().config.interference_types, 0);
            assert!(out.report.mape_interference.is_some());
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ExperimentSpec {
            replicates: 0,
            ..spec()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            train_fractions: vec![1.0],
            ..spec()
        }
        .validate()
        .is_err());
        assert!(ExperimentSpec {
            mean_model: false,
            quantile_model: false,
            ..spec()
        }
        .validate()
        .is_err());
    }
}
