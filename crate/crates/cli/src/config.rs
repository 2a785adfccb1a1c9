//! TOML run configuration and flag-over-file resolution.
//!
//! Precedence for every setting: command-line flag, then config file, then
//! (for the seed only) `RUNTIME_ORACLE_SEED`, then the built-in default.

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use runtime_oracle::dataset::SyntheticConfig;
use runtime_oracle::evaluation::{ExperimentSpec, InterferenceMode, Objective};
use runtime_oracle::model::NetworkConfig;
use runtime_oracle::training::{LossConfig, TrainConfig};
use serde::Deserialize;

use crate::args::ModelArgs;
use crate::CliError;

pub const SEED_ENV: &str = "RUNTIME_ORACLE_SEED";

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub synthetic: Option<SyntheticConfig>,
    pub split: SplitSection,
    pub network: Option<NetworkConfig>,
    /// `seed` in this section is ignored; the global seed is used.
    pub train: Option<TrainConfig>,
    pub loss: Option<LossConfig>,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub label: Option<String>,
    pub train_fractions: Option<Vec<f64>>,
    pub replicates: Option<usize>,
    pub objective: Option<Objective>,
    pub use_workload_features: Option<bool>,
    pub use_platform_features: Option<bool>,
    pub interference: Option<InterferenceMode>,
    pub epsilons: Option<Vec<f64>>,
    pub mean_model: Option<bool>,
    pub quantile_model: Option<bool>,
    pub baseline_max_sweeps: Option<usize>,
    pub baseline_tol: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Which flags were typed on the command line, as opposed to defaulted.
pub struct Given<'a>(pub &'a ArgMatches);

impl Given<'_> {
    pub fn has(&self, id: &str) -> bool {
        matches!(self.0.value_source(id), Some(ValueSource::CommandLine))
    }

    pub fn set<T: Clone>(&self, id: &str, slot: &mut T, value: &T) {
        if self.has(id) {
            *slot = value.clone();
        }
    }
}

pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(seed) = flag.or(file) {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

/// Flag value, else config value, else an error naming the flag.
pub fn require_path(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or paths.{name} in the config)")))
}

pub fn resolve_synthetic(cfg: &RunConfig, m: &ArgMatches, a: &crate::args::SynthArgs) -> SyntheticConfig {
    let g = Given(m);
    let mut s = cfg.synthetic.clone().unwrap_or_default();
    g.set("n_workloads", &mut s.n_workloads, &a.n_workloads);
    g.set("n_platforms", &mut s.n_platforms, &a.n_platforms);
    g.set("workload_dim", &mut s.workload_dim, &a.workload_dim);
    g.set("platform_dim", &mut s.platform_dim, &a.platform_dim);
    g.set("rank", &mut s.rank, &a.rank);
    g.set("interference_types", &mut s.interference_types, &a.interference_types);
    g.set("noise_sigma", &mut s.noise_sigma, &a.noise_sigma);
    g.set("obs_per_mode", &mut s.obs_per_mode, &a.obs_per_mode);
    g.set("interference_scale", &mut s.interference_scale, &a.interference_scale);
    g.set("leaky_slope", &mut s.leaky_slope, &a.leaky_slope);
    g.set("feature_noise", &mut s.feature_noise, &a.feature_noise);
    s
}

/// Experiment settings from the config file with model flags applied on top.
pub fn resolve_spec(cfg: &RunConfig, m: &ArgMatches, a: &ModelArgs) -> ExperimentSpec {
    let g = Given(m);
    let mut spec = ExperimentSpec::default();
    if let Some(n) = &cfg.network {
        spec.network = n.clone();
    }
    if let Some(t) = &cfg.train {
        spec.train = t.clone();
    }
    if let Some(l) = &cfg.loss {
        spec.loss = l.clone();
    }
    let e = &cfg.experiment;
    macro_rules! from_file {
        ($($field:ident),*) => {
            $(if let Some(v) = &e.$field {
                spec.$field = v.clone();
            })*
        };
    }
    from_file!(
        label,
        train_fractions,
        replicates,
        objective,
        use_workload_features,
        use_platform_features,
        interference,
        epsilons,
        mean_model,
        quantile_model,
        baseline_max_sweeps,
        baseline_tol
    );

    let net = &mut spec.network;
    g.set("hidden_sizes", &mut net.hidden_sizes, &a.hidden_sizes);
    g.set("embed_dim", &mut net.embed_dim, &a.embed_dim);
    g.set("learned_features", &mut net.learned_features, &a.learned_features);
    g.set("interference_types", &mut net.interference_types, &a.interference_types);
    g.set("quantiles", &mut net.quantiles, &a.quantiles);
    g.set("activation", &mut net.activation, &a.activation.into());
    g.set("leaky_slope", &mut net.leaky_slope, &a.leaky_slope);
    let t = &mut spec.train;
    g.set("steps", &mut t.steps, &a.steps);
    g.set("batch_per_mode", &mut t.batch_per_mode, &a.batch_per_mode);
    g.set("eval_every", &mut t.eval_every, &a.eval_every);
    g.set("learning_rate", &mut t.learning_rate, &a.learning_rate);
    g.set("beta1", &mut t.beta1, &a.beta1);
    g.set("beta2", &mut t.beta2, &a.beta2);
    g.set(
        "interference_weight",
        &mut spec.loss.interference_weight,
        &a.interference_weight,
    );
    g.set("objective", &mut spec.objective, &a.objective.into());
    g.set(
        "workload_features",
        &mut spec.use_workload_features,
        &a.workload_features,
    );
    g.set(
        "platform_features",
        &mut spec.use_platform_features,
        &a.platform_features,
    );
    g.set("interference", &mut spec.interference, &a.interference.into());
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{CommandFactory, FromArgMatches};

    use crate::args::{Cli, Command};

    fn parse(argv: &[&str]) -> (Cli, ArgMatches) {
        let m = Cli::command().try_get_matches_from(argv).unwrap();
        (Cli::from_arg_matches(&m).unwrap(), m)
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let cfg: RunConfig =
            toml::from_str("[train]\nsteps = 7\nbatch_per_mode = 9\n[network]\nembed_dim = 5\n").unwrap();
        let (cli, m) = parse(&["runtime-oracle", "train", "--steps", "3"]);
        let Command::Train(a) = cli.command else { panic!() };
        let spec = resolve_spec(&cfg, m.subcommand_matches("train").unwrap(), &a.model);
        assert_eq!(spec.train.steps, 3);
        assert_eq!(spec.train.batch_per_mode, 9);
        assert_eq!(spec.network.embed_dim, 5);
        assert_eq!(spec.train.eval_every, TrainConfig::default().eval_every);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("stepz = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nstepz = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[experiment]\nlabel = \"x\"\nfoo = 1").is_err());
    }

    #[test]
    fn synthetic_defaults_match_library() {
        let (cli, m) = parse(&["runtime-oracle", "synth"]);
        let Command::Synth(a) = cli.command else { panic!() };
        let s = resolve_synthetic(&RunConfig::default(), m.subcommand_matches("synth").unwrap(), &a);
        assert_eq!(s, SyntheticConfig::default());
    }

    #[test]
    fn model_flag_defaults_match_library() {
        let (cli, m) = parse(&["runtime-oracle", "train"]);
        let Command::Train(a) = cli.command else { panic!() };
        let spec = resolve_spec(&RunConfig::default(), m.subcommand_matches("train").unwrap(), &a.model);
        let d = ExperimentSpec::default();
        assert_eq!(a.model.hidden_sizes, d.network.hidden_sizes);
        assert_eq!(a.model.embed_dim, d.network.embed_dim);
        assert_eq!(a.model.quantiles, d.network.quantiles);
        assert_eq!(a.model.steps, d.train.steps);
        assert_eq!(a.model.batch_per_mode, d.train.batch_per_mode);
        assert_eq!(a.model.interference_weight, d.loss.interference_weight);
        assert_eq!(spec, d);
    }

    #[test]
    fn flag_seed_wins_over_file() {
        assert_eq!(resolve_seed(Some(3), Some(4)).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some(4)).unwrap(), 4);
    }
}
