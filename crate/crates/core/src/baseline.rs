//! Interference-blind linear scaling baseline `log C = w_bar[i] + p_bar[j]`,
//! fit by alternating closed-form minimization on isolated runs.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Observation};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_SWEEPS: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-10;

/// Per-workload log difficulty and per-platform log speed.
///
/// The pair is only determined up to a constant shift; fitted models fix
/// `mean(p_bar) = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineModel {
    pub w_bar: Vec<f64>,
    pub p_bar: Vec<f64>,
    /// Workloads never seen in isolation; they carry the mean of the others.
    pub fallback_workloads: Vec<usize>,
    pub fallback_platforms: Vec<usize>,
}

/// Loss after every alternation sweep, starting with the all-zero model.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub losses: Vec<f64>,
}

impl FitTrace {
    pub fn sweeps(&self) -> usize {
        self.losses.len() - 1
    }
}

impl BaselineModel {
    pub fn zeros(n_workloads: usize, n_platforms: usize) -> Self {
        BaselineModel {
            w_bar: vec![0.0; n_workloads],
            p_bar: vec![0.0; n_platforms],
            fallback_workloads: Vec::new(),
            fallback_platforms: Vec::new(),
        }
    }

    pub fn n_workloads(&self) -> usize {
        self.w_bar.len()
    }

    pub fn n_platforms(&self) -> usize {
        self.p_bar.len()
    }

    /// `w_bar[i] + p_bar[j]`
    pub fn log_runtime(&self, i: usize, j: usize) -> Result<f64> {
        let w = self
            .w_bar
            .get(i)
            .ok_or_else(|| Error::Index(format!("workload {i} >= {}", self.w_bar.len())))?;
        let p = self
            .p_bar
            .get(j)
            .ok_or_else(|| Error::Index(format!("platform {j} >= {}", self.p_bar.len())))?;
        Ok(w + p)
    }

    /// Shift so that `mean(p_bar) = 0`, moving the constant into `w_bar`.
    pub fn normalize_gauge(&mut self) {
        if self.p_bar.is_empty() {
            return;
        }
        let c = self.p_bar.iter().sum::<f64>() / self.p_bar.len() as f64;
        self.p_bar.iter_mut().for_each(|p| *p -= c);
        self.w_bar.iter_mut().for_each(|w| *w += c);
    }

    /// Log-residual `ln(runtime) - (w_bar[i] + p_bar[j])` for each observation.
    /// The interference set is not consulted.
    pub fn residual_targets(&self, observations: &[Observation]) -> Result<Vec<f64>> {
        observations
            .iter()
            .map(|o| Ok(o.runtime.ln() - self.log_runtime(o.workload, o.platform)?))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w_bar.iter().chain(&self.p_bar).all(|x| x.is_finite())
    }
}

pub fn fit_baseline(dataset: &Dataset, ids: &[usize], max_sweeps: usize, tol: f64) -> Result<BaselineModel> {
    fit_baseline_traced(dataset, ids, max_sweeps, tol).map(|(m, _)| m)
}

/// Fit on the interference-free observations among `ids`.
///
/// Each sweep sets every observed `w_bar[i]` to the mean of
/// `ln C - p_bar[j]` over its observations, then every `p_bar[j]`
/// symmetrically. Sweeps stop once the summed squared log error improves by
/// less than `tol`, or if rounding makes it increase, in which case the
/// previous iterate is kept.
pub fn fit_baseline_traced(
    dataset: &Dataset,
    ids: &[usize],
    max_sweeps: usize,
    tol: f64,
) -> Result<(BaselineModel, FitTrace)> {
    if max_sweeps == 0 {
        return Err(Error::validation("max_sweeps must be at least 1"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::validation(format!("tol must be positive, got {tol}")));
    }
    let (nw, np) = (dataset.n_workloads(), dataset.n_platforms());
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for &id in ids {
        let o = dataset
            .observations
            .get(id)
            .ok_or_else(|| Error::Index(format!("observation {id} >= {}", dataset.len())))?;
        if o.interference.is_empty() {
            rows.push((o.workload, o.platform, o.runtime.ln()));
        }
    }
    if rows.is_empty() {
        return Err(Error::validation(
            "baseline needs at least one observation without interference",
        ));
    }

    let mut w_count = vec![0usize; nw];
    let mut p_count = vec![0usize; np];
    for &(i, j, _) in &rows {
        w_count[i] += 1;
        p_count[j] += 1;
    }

    let loss = |w: &[f64], p: &[f64]| -> f64 {
        rows.iter()
            .map(|&(i, j, y)| {
                let d = y - w[i] - p[j];
                d * d
            })
            .sum()
    };

    let mut w = vec![0.0; nw];
    let mut p = vec![0.0; np];
    let mut losses = vec![loss(&w, &p)];
    let mut acc_w = vec![0.0; nw];
    let mut acc_p = vec![0.0; np];
    for _ in 0..max_sweeps {
        let (prev_w, prev_p) = (w.clone(), p.clone());
        acc_w.iter_mut().for_each(|a| *a = 0.0);
        for &(i, j, y) in &rows {
            acc_w[i] += y - p[j];
        }
        for i in 0..nw {
            if w_count[i] > 0 {
                w[i] = acc_w[i] / w_count[i] as f64;
            }
        }
        acc_p.iter_mut().for_each(|a| *a = 0.0);
        for &(i, j, y) in &rows {
            acc_p[j] += y - w[i];
        }
        for j in 0..np {
            if p_count[j] > 0 {
                p[j] = acc_p[j] / p_count[j] as f64;
            }
        }
        let current = loss(&w, &p);
        let previous = *losses.last().expect("non-empty");
        if current > previous {
            w = prev_w;
            p = prev_p;
            break;
        }
        losses.push(current);
        if previous - current < tol {
            break;
        }
    }

    // Gauge over observed platforms, then fill unobserved entries with the observed means.
    let observed_mean = |v: &[f64], count: &[usize]| {
        let (s, n) = v
            .iter()
            .zip(count)
            .filter(|(_, &c)| c > 0)
            .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
        s / n as f64
    };
    let c = observed_mean(&p, &p_count);
    for j in 0..np {
        if p_count[j] > 0 {
            p[j] -= c;
        }
    }
    for i in 0..nw {
        if w_count[i] > 0 {
            w[i] += c;
        }
    }
    let w_fill = observed_mean(&w, &w_count);
    let p_fill = observed_mean(&p, &p_count);
    let fallback_workloads: Vec<usize> = (0..nw).filter(|&i| w_count[i] == 0).collect();
    let fallback_platforms: Vec<usize> = (0..np).filter(|&j| p_count[j] == 0).collect();
    for &i in &fallback_workloads {
        w[i] = w_fill;
    }
    for &j in &fallback_platforms {
        p[j] = p_fill;
    }

    Ok((
        BaselineModel {
            w_bar: w,
            p_bar: p,
            fallback_workloads,
            fallback_platforms,
        },
        FitTrace { losses },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureTable;
    use crate::linalg::Matrix;

    fn dataset(nw: usize, np: usize, obs: Vec<Observation>) -> Dataset {
        let features = FeatureTable::new(
            Matrix::from_vec(nw, 1, vec![1.0; nw]),
            vec!["x".into()],
            Matrix::from_vec(np, 1, vec![1.0; np]),
            vec!["y".into()],
        )
        .unwrap();
        Dataset::new(obs, features).unwrap()
    }

    #[test]
    fn single_observation() {
        let ds = dataset(1, 1, vec![Observation::new(0, 0, vec![], std::f64::consts::E)]);
        let m = fit_baseline(&ds, &[0], DEFAULT_MAX_SWEEPS, DEFAULT_TOL).unwrap();
        assert_eq!(m.p_bar, vec![0.0]);
        assert!((m.w_bar[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn baseline_log_and_index_error() {
        let m = BaselineModel {
            w_bar: vec![1.5],
            p_bar: vec![-0.5],
            fallback_workloads: vec![],
            fallback_platforms: vec![],
        };
        assert_eq!(m.log_runtime(0, 0).unwrap(), 1.0);
        assert!(matches!(m.log_runtime(1, 0), Err(Error::Index(_))));
        assert!(matches!(m.log_runtime(0, 1), Err(Error::Index(_))));
    }

    #[test]
    fn gauge_shift_preserves_outputs() {
        let mut m = BaselineModel {
            w_bar: vec![0.3, -1.2, 2.2],
            p_bar: vec![0.7, -0.1],
            fallback_workloads: vec![],
            fallback_platforms: vec![],
        };
        let before: Vec<f64> = (0..3)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| m.log_runtime(i, j).unwrap())
            .collect();
        let c = 0.37;
        m.w_bar.iter_mut().for_each(|w| *w += c);
        m.p_bar.iter_mut().for_each(|p| *p -= c);
        m.normalize_gauge();
        assert!(m.p_bar.iter().sum::<f64>().abs() < 1e-15);
        let after: Vec<f64> = (0..3)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| m.log_runtime(i, j).unwrap())
            .collect();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_by_definition() {
        let m = BaselineModel {
            w_bar: vec![0.4],
            p_bar: vec![-0.9],
            fallback_workloads: vec![],
            fallback_platforms: vec![],
        };
        let obs = vec![
            Observation::new(0, 0, vec![], (0.4f64 - 0.9).exp()),
            Observation::new(0, 0, vec![0], (0.4f64 - 0.9 + 0.3).exp()),
        ];
        let y = m.residual_targets(&obs).unwrap();
        assert!(y[0].abs() < 1e-15);
        assert!((y[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn interference_observations_are_ignored() {
        let ds = dataset(
            2,
            1,
            vec![
                Observation::new(0, 0, vec![], 2.0),
                Observation::new(1, 0, vec![0], 50.0),
            ],
        );
        let m = fit_baseline(&ds, &[0, 1], 100, 1e-10).unwrap();
        assert_eq!(m.fallback_workloads, vec![1]);
        assert!((m.w_bar[1] - m.w_bar[0]).abs() < 1e-15);
        let err = fit_baseline(&ds, &[1], 100, 1e-10).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn sweeps_never_increase_loss() {
        // sparse, irregular observation pattern
        let mut obs = Vec::new();
        let mut state = 17u64;
        for _ in 0..60 {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let i = (state >> 33) as usize % 7;
            let j = (state >> 45) as usize % 5;
            let t = 0.1 + ((state >> 11) % 1000) as f64 / 100.0;
            obs.push(Observation::new(i, j, vec![], t));
        }
        let ds = dataset(7, 5, obs);
        let ids: Vec<usize> = (0..ds.len()).collect();
        let (_, trace) = fit_baseline_traced(&ds, &ids, 500, 1e-14).unwrap();
        assert!(trace.sweeps() >= 2);
        for pair in trace.losses.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }
}
