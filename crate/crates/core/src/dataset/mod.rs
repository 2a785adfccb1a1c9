//! Runtime observations, workload/platform side information, and splits.

mod io;
mod split;
mod synthetic;

pub use io::{load_dataset, save_dataset, DatasetFormat};
pub use split::{load_split, make_split, save_split, split_file_name, split_indices, Split};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticOracle};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Upper bound on simultaneously running interferers.
pub const MAX_INTERFERERS: usize = 3;

/// One measured runtime of a workload on a platform, with the multiset of
/// workloads that ran alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub workload: usize,
    pub platform: usize,
    pub interference: Vec<usize>,
    /// Seconds.
    pub runtime: f64,
}

impl Observation {
    pub fn new(workload: usize, platform: usize, interference: Vec<usize>, runtime: f64) -> Self {
        Observation {
            workload,
            platform,
            interference,
            runtime,
        }
    }

    /// Number of interferers, which is also the calibration pool key.
    pub fn mode(&self) -> usize {
        self.interference.len()
    }
}

/// Side information for workloads and platforms, one row per entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub workload_features: Matrix,
    pub workload_feature_names: Vec<String>,
    pub platform_features: Matrix,
    pub platform_feature_names: Vec<String>,
}

impl FeatureTable {
    pub fn new(
        workload_features: Matrix,
        workload_feature_names: Vec<String>,
        platform_features: Matrix,
        platform_feature_names: Vec<String>,
    ) -> Result<Self> {
        let table = FeatureTable {
            workload_features,
            workload_feature_names,
            platform_features,
            platform_feature_names,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workload_feature_names.len() != self.workload_features.cols() {
            return Err(Error::validation("workload feature names do not match columns"));
        }
        if self.platform_feature_names.len() != self.platform_features.cols() {
            return Err(Error::validation("platform feature names do not match columns"));
        }
        if let Some(pos) = self.workload_features.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite workload feature at row {} column {}",
                pos / self.workload_features.cols(),
                pos % self.workload_features.cols()
            )));
        }
        if let Some(pos) = self.platform_features.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite platform feature at row {} column {}",
                pos / self.platform_features.cols(),
                pos % self.platform_features.cols()
            )));
        }
        if let Some(pos) = self.workload_features.as_slice().iter().position(|&x| x < 0.0) {
            return Err(Error::validation(format!(
                "negative workload feature at row {} column {}",
                pos / self.workload_features.cols(),
                pos % self.workload_features.cols()
            )));
        }
        Ok(())
    }

    /// Drop columns that are zero for every entity.
    pub fn drop_zero_columns(&mut self) {
        let (m, names) = drop_zero_columns(&self.workload_features, &self.workload_feature_names);
        self.workload_features = m;
        self.workload_feature_names = names;
        let (m, names) = drop_zero_columns(&self.platform_features, &self.platform_feature_names);
        self.platform_features = m;
        self.platform_feature_names = names;
    }
}

fn nonzero_columns(m: &Matrix) -> Vec<usize> {
    (0..m.cols())
        .filter(|&c| (0..m.rows()).any(|r| m[(r, c)] != 0.0))
        .collect()
}

fn drop_zero_columns(m: &Matrix, names: &[String]) -> (Matrix, Vec<String>) {
    let keep = nonzero_columns(m);
    let names = keep.iter().map(|&c| names[c].clone()).collect();
    (m.select_columns(&keep), names)
}

/// Log-frequency opcode features with unused opcodes removed.
#[derive(Debug, Clone, PartialEq)]
pub struct OpcodeFeatures {
    pub values: Matrix,
    /// Indices into the raw count columns that survived.
    pub kept_columns: Vec<usize>,
}

/// Apply `f(n) = ln(n + 1)` elementwise and drop opcodes no workload executes.
pub fn transform_opcode_counts(raw_counts: &Matrix) -> Result<OpcodeFeatures> {
    if let Some(pos) = raw_counts.as_slice().iter().position(|&n| !n.is_finite() || n < 0.0) {
        return Err(Error::validation(format!(
            "opcode count at row {} column {} must be a finite non-negative number",
            pos / raw_counts.cols(),
            pos % raw_counts.cols()
        )));
    }
    let kept_columns = nonzero_columns(raw_counts);
    let mut values = raw_counts.select_columns(&kept_columns);
    values.as_mut_slice().iter_mut().for_each(|n| *n = n.ln_1p());
    Ok(OpcodeFeatures { values, kept_columns })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub features: FeatureTable,
    pub workload_names: Option<Vec<String>>,
    pub platform_names: Option<Vec<String>>,
}

impl Dataset {
    /// Build and validate a dataset. All-zero feature columns are dropped.
    pub fn new(observations: Vec<Observation>, mut features: FeatureTable) -> Result<Self> {
        features.drop_zero_columns();
        let dataset = Dataset {
            observations,
            features,
            workload_names: None,
            platform_names: None,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    pub fn n_workloads(&self) -> usize {
        self.features.workload_features.rows()
    }

    pub fn n_platforms(&self) -> usize {
        self.features.platform_features.rows()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (nw, np) = (self.n_workloads(), self.n_platforms());
        if nw == 0 || np == 0 {
            return Err(Error::validation(
                "dataset needs at least one workload and one platform",
            ));
        }
        self.features.validate()?;
        for (row, obs) in self.observations.iter().enumerate() {
            validate_observation(obs, nw, np).map_err(|msg| Error::validation(format!("observation {row}: {msg}")))?;
        }
        if let Some(names) = &self.workload_names {
            if names.len() != nw {
                return Err(Error::validation("workload name count does not match features"));
            }
        }
        if let Some(names) = &self.platform_names {
            if names.len() != np {
                return Err(Error::validation("platform name count does not match features"));
            }
        }
        Ok(())
    }

    /// Observation ids grouped by number of interferers.
    pub fn ids_by_mode(&self, ids: &[usize]) -> [Vec<usize>; MAX_INTERFERERS + 1] {
        let mut out: [Vec<usize>; MAX_INTERFERERS + 1] = Default::default();
        for &id in ids {
            out[self.observations[id].mode()].push(id);
        }
        out
    }
}

pub(crate) fn validate_observation(obs: &Observation, nw: usize, np: usize) -> Result<(), String> {
    if !obs.runtime.is_finite() || obs.runtime <= 0.0 {
        return Err(format!("runtime must be positive and finite, got {}", obs.runtime));
    }
    if obs.workload >= nw {
        return Err(format!("index out of range: workload {} >= {nw}", obs.workload));
    }
    if obs.platform >= np {
        return Err(format!("index out of range: platform {} >= {np}", obs.platform));
    }
    if obs.interference.len() > MAX_INTERFERERS {
        return Err(format!(
            "{} interfering workloads exceeds the limit of {MAX_INTERFERERS}",
            obs.interference.len()
        ));
    }
    if let Some(&k) = obs.interference.iter().find(|&&k| k >= nw) {
        return Err(format!("index out of range: interfering workload {k} >= {nw}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_features(nw: usize, np: usize) -> FeatureTable {
        FeatureTable::new(
            Matrix::from_vec(nw, 1, vec![1.0; nw]),
            vec!["op".into()],
            Matrix::from_vec(np, 1, vec![2.0; np]),
            vec!["freq".into()],
        )
        .unwrap()
    }

    #[test]
    fn opcode_transform_values() {
        let raw = Matrix::from_vec(2, 3, vec![0.0, std::f64::consts::E - 1.0, 100.0, 0.0, 0.0, 3.0]);
        let out = transform_opcode_counts(&raw).unwrap();
        assert_eq!(out.kept_columns, vec![1, 2]);
        assert_eq!(out.values[(1, 0)], 0.0);
        assert!((out.values[(0, 0)] - 1.0).abs() < 1e-15);
        // ln(101) = 4.61512051684126
        assert!((out.values[(0, 1)] - 4.615_120_516_841_26).abs() < 1e-12);
    }

    #[test]
    fn opcode_transform_rejects_negative() {
        let raw = Matrix::from_vec(1, 2, vec![1.0, -1.0]);
        assert!(matches!(transform_opcode_counts(&raw), Err(Error::Validation(_))));
    }

    #[test]
    fn dataset_validation() {
        let ok = Dataset::new(vec![Observation::new(0, 1, vec![0], 1.0)], tiny_features(2, 2));
        assert!(ok.is_ok());

        let zero = Dataset::new(vec![Observation::new(0, 0, vec![], 0.0)], tiny_features(2, 2));
        assert!(zero.unwrap_err().to_string().contains("observation 0"));

        let oob = Dataset::new(vec![Observation::new(2, 0, vec![], 1.0)], tiny_features(2, 2));
        assert!(oob.unwrap_err().to_string().contains("index out of range"));

        let too_many = Dataset::new(vec![Observation::new(0, 0, vec![0, 1, 1, 0], 1.0)], tiny_features(2, 2));
        assert!(too_many.is_err());
    }

    #[test]
    fn zero_columns_are_dropped() {
        let features = FeatureTable {
            workload_features: Matrix::from_vec(2, 2, vec![0.0, 1.0, 0.0, 2.0]),
            workload_feature_names: vec!["unused".into(), "used".into()],
            platform_features: Matrix::from_vec(1, 1, vec![1.0]),
            platform_feature_names: vec!["f".into()],
        };
        let ds = Dataset::new(vec![], features).unwrap();
        assert_eq!(ds.features.workload_feature_names, vec!["used".to_string()]);
        assert_eq!(ds.features.workload_features.cols(), 1);
    }
}
