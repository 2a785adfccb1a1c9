//! Planted-parameter generator used to test recovery, calibration and ablations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{transform_opcode_counts, Dataset, FeatureTable, Observation, MAX_INTERFERERS};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_workloads: usize,
    pub n_platforms: usize,
    /// Number of raw opcode counters per workload (before unused ones are dropped).
    pub workload_dim: usize,
    pub platform_dim: usize,
    /// Rank of the planted residual factors.
    pub rank: usize,
    /// Number of planted interference types.
    pub interference_types: usize,
    /// Std-dev of the additive log-space runtime noise.
    pub noise_sigma: f64,
    pub obs_per_mode: usize,
    /// Std-dev multiplier of the planted interference factors relative to
    /// the residual factors.
    pub interference_scale: f64,
    pub leaky_slope: f64,
    /// Std-dev of the noise added to the feature probes.
    pub feature_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_workloads: 30,
            n_platforms: 15,
            workload_dim: 16,
            platform_dim: 16,
            rank: 4,
            interference_types: 1,
            noise_sigma: 0.02,
            obs_per_mode: 400,
            interference_scale: 0.1,
            leaky_slope: 0.1,
            feature_noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_workloads", self.n_workloads),
            ("n_platforms", self.n_platforms),
            ("workload_dim", self.workload_dim),
            ("platform_dim", self.platform_dim),
            ("rank", self.rank),
            ("obs_per_mode", self.obs_per_mode),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be at least 1")));
            }
        }
        let non_negative = [
            ("noise_sigma", self.noise_sigma),
            ("interference_scale", self.interference_scale),
            ("feature_noise", self.feature_noise),
        ];
        for (name, v) in non_negative {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::validation(format!(
                "leaky_slope must be in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Planted parameters; evaluates the exact noiseless log runtime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub w_bar: Vec<f64>,
    pub p_bar: Vec<f64>,
    /// `N_w x rank`
    pub workload_factors: Matrix,
    /// `N_p x rank`
    pub platform_factors: Matrix,
    /// Per platform, `types x rank`.
    pub susceptibility: Vec<Matrix>,
    /// Per platform, `types x rank`.
    pub magnitude: Vec<Matrix>,
    pub noise_sigma: f64,
    pub leaky_slope: f64,
}

impl SyntheticOracle {
    fn activation(&self, x: f64) -> f64 {
        if x >= 0.0 {
            x
        } else {
            self.leaky_slope * x
        }
    }

    pub fn interference_types(&self) -> usize {
        self.susceptibility.first().map_or(0, Matrix::rows)
    }

    /// Noiseless log runtime of workload `i` on platform `j` alongside `interference`.
    pub fn log_runtime(&self, i: usize, j: usize, interference: &[usize]) -> f64 {
        let wi = self.workload_factors.row(i);
        let mut out = self.w_bar[i] + self.p_bar[j] + dot(wi, self.platform_factors.row(j));
        for t in 0..self.interference_types() {
            let magnitude: f64 = interference
                .iter()
                .map(|&k| dot(self.workload_factors.row(k), self.magnitude[j].row(t)))
                .sum();
            out += dot(wi, self.susceptibility[j].row(t)) * self.activation(magnitude);
        }
        out
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            std * z
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Random linear probe `B u + noise` of each row of `latent`.
fn probe(rng: &mut ChaCha8Rng, latent: &Matrix, dim: usize, noise: f64) -> Matrix {
    let width = latent.cols();
    let b = gaussian_matrix(rng, dim, width, 1.0 / (width as f64).sqrt());
    let mut out = Matrix::zeros(latent.rows(), dim);
    for i in 0..latent.rows() {
        for c in 0..dim {
            let eps: f64 = rng.sample(StandardNormal);
            out[(i, c)] = dot(b.row(c), latent.row(i)) + noise * eps;
        }
    }
    out
}

/// Generate a dataset from planted parameters together with the oracle that produced it.
///
/// Observations are drawn uniformly for every interference degree 0..=3,
/// `obs_per_mode` each. Workload features are opcode counts derived from a
/// noisy linear probe of the planted workload parameters and passed through
/// the log-frequency transform; platform features are a noisy linear probe of
/// the planted platform parameters.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<(Dataset, SyntheticOracle)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nw, np, r, s) = (
        config.n_workloads,
        config.n_platforms,
        config.rank,
        config.interference_types,
    );

    let unit = Uniform::new(-1.0f64, 1.0).expect("valid range");
    let w_bar: Vec<f64> = (0..nw).map(|_| unit.sample(&mut rng)).collect();
    let p_bar: Vec<f64> = (0..np).map(|_| unit.sample(&mut rng)).collect();
    let factor_std = 1.0 / (r as f64).sqrt();
    let workload_factors = gaussian_matrix(&mut rng, nw, r, factor_std);
    let platform_factors = gaussian_matrix(&mut rng, np, r, factor_std);
    let inter_std = config.interference_scale * factor_std;
    let susceptibility: Vec<Matrix> = (0..np).map(|_| gaussian_matrix(&mut rng, s, r, inter_std)).collect();
    let magnitude: Vec<Matrix> = (0..np).map(|_| gaussian_matrix(&mut rng, s, r, inter_std)).collect();

    let oracle = SyntheticOracle {
        w_bar,
        p_bar,
        workload_factors,
        platform_factors,
        susceptibility,
        magnitude,
        noise_sigma: config.noise_sigma,
        leaky_slope: config.leaky_slope,
    };

    // Features: probes of unit-scaled planted parameters.
    let uniform_std = 1.0 / 3f64.sqrt();
    let mut workload_latent = Matrix::zeros(nw, 1 + r);
    for i in 0..nw {
        let row = workload_latent.row_mut(i);
        row[0] = oracle.w_bar[i] / uniform_std;
        for (dst, &x) in row[1..].iter_mut().zip(oracle.workload_factors.row(i)) {
            *dst = x / factor_std;
        }
    }
    let mut platform_latent = Matrix::zeros(np, 1 + r + 2 * s * r);
    for j in 0..np {
        let row = platform_latent.row_mut(j);
        row[0] = oracle.p_bar[j] / uniform_std;
        let mut c = 1;
        for &x in oracle.platform_factors.row(j) {
            row[c] = x / factor_std;
            c += 1;
        }
        for m in [&oracle.susceptibility[j], &oracle.magnitude[j]] {
            for &x in m.as_slice() {
                row[c] = if inter_std > 0.0 { x / inter_std } else { 0.0 };
                c += 1;
            }
        }
    }
    let workload_probe = probe(&mut rng, &workload_latent, config.workload_dim, config.feature_noise);
    let mut counts = workload_probe;
    counts
        .as_mut_slice()
        .iter_mut()
        .for_each(|z| *z = (4.0 + *z).exp().round());
    let opcode = transform_opcode_counts(&counts)?;
    let workload_feature_names = opcode.kept_columns.iter().map(|c| format!("op{c}")).collect();
    let platform_features = probe(&mut rng, &platform_latent, config.platform_dim, config.feature_noise);
    let platform_feature_names = (0..config.platform_dim).map(|c| format!("hw{c}")).collect();

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut observations = Vec::with_capacity(config.obs_per_mode * (MAX_INTERFERERS + 1));
    for mode in 0..=MAX_INTERFERERS {
        for _ in 0..config.obs_per_mode {
            let i = rng.random_range(0..nw);
            let j = rng.random_range(0..np);
            let interference: Vec<usize> = (0..mode).map(|_| rng.random_range(0..nw)).collect();
            let eps: f64 = noise.sample(&mut rng);
            let log_runtime = oracle.log_runtime(i, j, &interference) + config.noise_sigma * eps;
            observations.push(Observation::new(i, j, interference, log_runtime.exp()));
        }
    }

    let features = FeatureTable::new(
        opcode.values,
        workload_feature_names,
        platform_features,
        platform_feature_names,
    )?;
    let mut dataset = Dataset::new(observations, features)?;
    dataset.workload_names = Some((0..nw).map(|i| format!("w{i}")).collect());
    dataset.platform_names = Some((0..np).map(|j| format!("p{j}")).collect());
    Ok((dataset, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_workloads: 8,
            n_platforms: 5,
            workload_dim: 6,
            platform_dim: 5,
            rank: 2,
            interference_types: 2,
            obs_per_mode: 100,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn counts_observations_per_mode() {
        let (ds, _) = generate_synthetic(&small(), 1).unwrap();
        assert_eq!(ds.len(), 400);
        let by_mode = ds.ids_by_mode(&(0..ds.len()).collect::<Vec<_>>());
        assert!(by_mode.iter().all(|ids| ids.len() == 100));
    }

    #[test]
    fn zero_noise_runtimes_match_oracle() {
        let cfg = SyntheticConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let (ds, oracle) = generate_synthetic(&cfg, 9).unwrap();
        for o in &ds.observations {
            let x = oracle.log_runtime(o.workload, o.platform, &o.interference);
            assert_eq!(o.runtime, x.exp());
            assert!((o.runtime.ln() - x).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn empty_interference_is_additive_plus_factor_term() {
        let cfg = SyntheticConfig {
            interference_scale: 0.0,
            ..small()
        };
        let (_, oracle) = generate_synthetic(&cfg, 4).unwrap();
        for i in 0..8 {
            for j in 0..5 {
                let direct = oracle.w_bar[i]
                    + oracle.p_bar[j]
                    + dot(oracle.workload_factors.row(i), oracle.platform_factors.row(j));
                assert_eq!(oracle.log_runtime(i, j, &[]), direct);
                assert_eq!(oracle.log_runtime(i, j, &[1, 2]), direct);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small(), 5).unwrap();
        let b = generate_synthetic(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 6).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SyntheticConfig {
            noise_sigma: -1.0,
            ..small()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
        let cfg = SyntheticConfig {
            n_workloads: 0,
            ..small()
        };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }
}
