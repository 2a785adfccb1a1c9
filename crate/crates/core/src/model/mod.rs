//! Two-tower embedding model with interference heads and multi-quantile
//! workload heads.
//!
//! Predicted log runtime of workload `i` on platform `j` alongside the
//! multiset `K`, using quantile head `h`:
//!
//! ```text
//! log C = w_bar[i] + p_bar[j] + <w_i, p_j>
//!       + sum_t <w_i, vs_t(j)> * act( sum_{k in K} <w_k, vg_t(j)> )
//! ```
//!
//! `w_i` is block `h` of the workload network output, `p_j`, `vs_t(j)` and
//! `vg_t(j)` are blocks of the platform network output. The implicit
//! per-platform interference matrix is `F_j = sum_t vs_t vg_t^T`.

mod io;
mod mlp;

pub use io::{load_model, save_model};
pub use mlp::{Dense, Mlp, MlpTrace};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::BaselineModel;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

pub const DEFAULT_QUANTILES: [f64; 8] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Identity for non-negative input, `slope * x` below zero.
    #[default]
    LeakyRelu,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_sizes: Vec<usize>,
    /// Embedding dimension `r`.
    pub embed_dim: usize,
    /// Learned per-entity features `q` appended to the side information.
    pub learned_features: usize,
    /// Interference types `s`.
    pub interference_types: usize,
    /// Target quantiles of the workload heads, strictly increasing.
    pub quantiles: Vec<f64>,
    /// Single head trained with squared loss instead of the quantile heads.
    pub mean_mode: bool,
    pub activation: Activation,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden_sizes: vec![128, 128],
            embed_dim: 32,
            learned_features: 1,
            interference_types: 2,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            mean_mode: false,
            activation: Activation::LeakyRelu,
            leaky_slope: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn mean() -> Self {
        NetworkConfig {
            mean_mode: true,
            ..NetworkConfig::default()
        }
    }

    /// Number of workload heads.
    pub fn heads(&self) -> usize {
        if self.mean_mode {
            1
        } else {
            self.quantiles.len()
        }
    }

    pub fn workload_output_dim(&self) -> usize {
        self.heads() * self.embed_dim
    }

    pub fn platform_output_dim(&self) -> usize {
        self.embed_dim * (1 + 2 * self.interference_types)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::validation("embed_dim must be at least 1"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::validation("hidden layer sizes must be positive"));
        }
        if !self.mean_mode {
            if self.quantiles.is_empty() {
                return Err(Error::validation("quantile mode needs at least one target quantile"));
            }
            if self.quantiles.iter().any(|&q| !(q > 0.0 && q < 1.0)) {
                return Err(Error::validation("target quantiles must lie in (0, 1)"));
            }
            if self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::validation("target quantiles must be strictly increasing"));
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

    pub fn activate(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Identity => x,
            Activation::LeakyRelu if x >= 0.0 => x,
            Activation::LeakyRelu => self.leaky_slope * x,
        }
    }

    pub fn activate_grad(&self, x: f64) -> f64 {
        match self.activation {
            Activation::Identity => 1.0,
            Activation::LeakyRelu if x >= 0.0 => 1.0,
            Activation::LeakyRelu => self.leaky_slope,
        }
    }
}

/// Every trainable tensor. Gradients and optimizer moments use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub workload_net: Mlp,
    pub platform_net: Mlp,
    /// `N_w x q`
    pub workload_latent: Matrix,
    /// `N_p x q`
    pub platform_latent: Matrix,
}

impl Parameters {
    pub fn zeros_like(other: &Parameters) -> Self {
        let mut p = other.clone();
        p.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        p
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.workload_net.slices();
        out.extend(self.platform_net.slices());
        out.push(self.workload_latent.as_slice());
        out.push(self.platform_latent.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.workload_net.slices_mut();
        out.extend(self.platform_net.slices_mut());
        out.push(self.workload_latent.as_mut_slice());
        out.push(self.platform_latent.as_mut_slice());
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value at a flat position (concatenation of `slices()`).
    pub fn get(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Trained or initialized predictor, including the inputs it embeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeModel {
    pub config: NetworkConfig,
    pub baseline: BaselineModel,
    /// Side information per workload, `N_w x d_w`.
    pub workload_inputs: Matrix,
    /// Side information per platform, `N_p x d_p`.
    pub platform_inputs: Matrix,
    pub params: Parameters,
}

/// Workload and platform embeddings for every entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `N_w x (heads * r)`
    pub workload: Matrix,
    /// `N_p x (r * (1 + 2s))`: `p_j`, then `vs_1..vs_s`, then `vg_1..vg_s`.
    pub platform: Matrix,
    pub embed_dim: usize,
    pub interference_types: usize,
}

/// Platform embedding split into its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct PlatformEmbedding {
    pub p: Vec<f64>,
    pub susceptibility: Vec<Vec<f64>>,
    pub magnitude: Vec<Vec<f64>>,
}

impl Embeddings {
    pub fn workload(&self, i: usize, head: usize) -> &[f64] {
        let r = self.embed_dim;
        &self.workload.row(i)[head * r..(head + 1) * r]
    }

    pub fn platform(&self, j: usize) -> &[f64] {
        &self.platform.row(j)[..self.embed_dim]
    }

    pub fn susceptibility(&self, j: usize, t: usize) -> &[f64] {
        let r = self.embed_dim;
        &self.platform.row(j)[(1 + t) * r..(2 + t) * r]
    }

    pub fn magnitude(&self, j: usize, t: usize) -> &[f64] {
        let r = self.embed_dim;
        let s = self.interference_types;
        &self.platform.row(j)[(1 + s + t) * r..(2 + s + t) * r]
    }

    /// Embedding part of the log prediction (everything except the baseline).
    /// `interference` must already be sorted.
    pub fn interaction(&self, config: &NetworkConfig, i: usize, j: usize, interference: &[usize], head: usize) -> f64 {
        let wi = self.workload(i, head);
        let mut out = dot(wi, self.platform(j));
        if interference.is_empty() {
            return out;
        }
        for t in 0..self.interference_types {
            let vg = self.magnitude(j, t);
            let mut magnitude = 0.0;
            for &k in interference {
                magnitude += dot(self.workload(k, head), vg);
            }
            out += dot(wi, self.susceptibility(j, t)) * config.activate(magnitude);
        }
        out
    }
}

pub(crate) fn sorted(interference: &[usize]) -> Vec<usize> {
    let mut k = interference.to_vec();
    k.sort_unstable();
    k
}

/// Deterministic initialization: Glorot-normal weights, zero biases,
/// learned features from `N(0, 0.01^2)`.
pub fn init_model(
    config: NetworkConfig,
    workload_inputs: Matrix,
    platform_inputs: Matrix,
    baseline: BaselineModel,
    seed: u64,
) -> Result<RuntimeModel> {
    config.validate()?;
    let (nw, np) = (workload_inputs.rows(), platform_inputs.rows());
    if baseline.n_workloads() != nw || baseline.n_platforms() != np {
        return Err(Error::validation(format!(
            "baseline covers {}x{} entities but inputs have {nw} workloads and {np} platforms",
            baseline.n_workloads(),
            baseline.n_platforms()
        )));
    }
    if nw == 0 || np == 0 {
        return Err(Error::validation("model needs at least one workload and one platform"));
    }
    let q = config.learned_features;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workload_net = Mlp::glorot(
        workload_inputs.cols() + q,
        &config.hidden_sizes,
        config.workload_output_dim(),
        &mut rng,
    );
    let platform_net = Mlp::glorot(
        platform_inputs.cols() + q,
        &config.hidden_sizes,
        config.platform_output_dim(),
        &mut rng,
    );
    let mut latent = |rows: usize| {
        let data = (0..rows * q)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                0.01 * z
            })
            .collect();
        Matrix::from_vec(rows, q, data)
    };
    let workload_latent = latent(nw);
    let platform_latent = latent(np);
    Ok(RuntimeModel {
        config,
        baseline,
        workload_inputs,
        platform_inputs,
        params: Parameters {
            workload_net,
            platform_net,
            workload_latent,
            platform_latent,
        },
    })
}

impl RuntimeModel {
    pub fn n_workloads(&self) -> usize {
        self.workload_inputs.rows()
    }

    pub fn n_platforms(&self) -> usize {
        self.platform_inputs.rows()
    }

    pub fn heads(&self) -> usize {
        self.config.heads()
    }

    /// Side information with the learned features appended.
    pub fn workload_net_input(&self) -> Matrix {
        self.workload_inputs.hconcat(&self.params.workload_latent)
    }

    pub fn platform_net_input(&self) -> Matrix {
        self.platform_inputs.hconcat(&self.params.platform_latent)
    }

    pub fn embeddings(&self) -> Embeddings {
        Embeddings {
            workload: self.params.workload_net.forward(&self.workload_net_input()),
            platform: self.params.platform_net.forward(&self.platform_net_input()),
            embed_dim: self.config.embed_dim,
            interference_types: self.config.interference_types,
        }
    }

    fn check_workload(&self, i: usize) -> Result<()> {
        if i >= self.n_workloads() {
            return Err(Error::Index(format!("workload {i} >= {}", self.n_workloads())));
        }
        Ok(())
    }

    fn check_platform(&self, j: usize) -> Result<()> {
        if j >= self.n_platforms() {
            return Err(Error::Index(format!("platform {j} >= {}", self.n_platforms())));
        }
        Ok(())
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads() {
            return Err(Error::Index(format!("head {head} >= {}", self.heads())));
        }
        Ok(())
    }

    fn workload_row_output(&self, i: usize) -> Vec<f64> {
        let mut x = self.workload_inputs.row(i).to_vec();
        x.extend_from_slice(self.params.workload_latent.row(i));
        let input = Matrix::from_vec(1, x.len(), x);
        self.params.workload_net.forward(&input).row(0).to_vec()
    }

    fn platform_row_output(&self, j: usize) -> Vec<f64> {
        let mut x = self.platform_inputs.row(j).to_vec();
        x.extend_from_slice(self.params.platform_latent.row(j));
        let input = Matrix::from_vec(1, x.len(), x);
        self.params.platform_net.forward(&input).row(0).to_vec()
    }

    /// One `r`-vector per head.
    pub fn embed_workload(&self, i: usize) -> Result<Vec<Vec<f64>>> {
        self.check_workload(i)?;
        let out = self.workload_row_output(i);
        Ok(out.chunks(self.config.embed_dim).map(<[f64]>::to_vec).collect())
    }

    pub fn embed_platform(&self, j: usize) -> Result<PlatformEmbedding> {
        self.check_platform(j)?;
        let out = self.platform_row_output(j);
        let r = self.config.embed_dim;
        let s = self.config.interference_types;
        let block = |b: usize| out[b * r..(b + 1) * r].to_vec();
        Ok(PlatformEmbedding {
            p: block(0),
            susceptibility: (0..s).map(|t| block(1 + t)).collect(),
            magnitude: (0..s).map(|t| block(1 + s + t)).collect(),
        })
    }

    /// Predicted log runtime. `interference` is a multiset; order does not matter.
    pub fn forward(&self, i: usize, j: usize, interference: &[usize], head: usize) -> Result<f64> {
        self.check_workload(i)?;
        self.check_platform(j)?;
        self.check_head(head)?;
        for &k in interference {
            self.check_workload(k)?;
        }
        let k = sorted(interference);
        let mut rows: Vec<usize> = vec![i];
        rows.extend(k.iter().copied());
        rows.sort_unstable();
        rows.dedup();
        // Embed only the rows needed; each row's output matches the full table.
        let mut workload = Matrix::zeros(self.n_workloads(), self.config.workload_output_dim());
        for &row in &rows {
            workload.row_mut(row).copy_from_slice(&self.workload_row_output(row));
        }
        let mut platform = Matrix::zeros(self.n_platforms(), self.config.platform_output_dim());
        platform.row_mut(j).copy_from_slice(&self.platform_row_output(j));
        let emb = Embeddings {
            workload,
            platform,
            embed_dim: self.config.embed_dim,
            interference_types: self.config.interference_types,
        };
        Ok(self.baseline.log_runtime(i, j)? + emb.interaction(&self.config, i, j, &k, head))
    }

    /// Predicted runtime in seconds.
    pub fn predict_runtime(&self, i: usize, j: usize, interference: &[usize], head: usize) -> Result<f64> {
        Ok(self.forward(i, j, interference, head)?.exp())
    }

    /// Log predictions for many queries, sharing one embedding pass.
    pub fn forward_batch(&self, queries: &[(usize, usize, &[usize])], head: usize) -> Result<Vec<f64>> {
        self.check_head(head)?;
        let emb = self.embeddings();
        queries
            .iter()
            .map(|&(i, j, k)| {
                self.check_workload(i)?;
                self.check_platform(j)?;
                for &kk in k {
                    self.check_workload(kk)?;
                }
                let k = sorted(k);
                Ok(self.baseline.log_runtime(i, j)? + emb.interaction(&self.config, i, j, &k, head))
            })
            .collect()
    }

    /// Log predictions of every head for many queries; one row per query.
    pub fn forward_heads(&self, queries: &[(usize, usize, &[usize])]) -> Result<Matrix> {
        let emb = self.embeddings();
        let heads = self.heads();
        let mut out = Matrix::zeros(queries.len(), heads);
        for (row, &(i, j, k)) in queries.iter().enumerate() {
            self.check_workload(i)?;
            self.check_platform(j)?;
            for &kk in k {
                self.check_workload(kk)?;
            }
            let k = sorted(k);
            let base = self.baseline.log_runtime(i, j)?;
            for h in 0..heads {
                out.row_mut(row)[h] = base + emb.interaction(&self.config, i, j, &k, h);
            }
        }
        Ok(out)
    }
}
