//! Experiment configuration: a TOML file with nested tables.
//!
//! Only `seed` is required. Everything else defaults to the 2D ring benchmark:
//!
//! ```toml
//! seed = 1
//!
//! [target]
//! kind = "ring"
//! modes = 8
//! radius = 2.0
//! variance = 0.09
//!
//! [model_error]
//! mean_shift = [0.5, 0.0]
//!
//! [sampling]
//! gamma = 85.0
//! strategies = ["none", "full"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use diffrs_core::{
    make_vp_schedule, BetaRule, DiffusionModel, GaussianMixture, KernelMode, LambdaRule,
    ModelError, NoiseSchedule, PriorReference, Strategy, TimeEmbedding, VarianceRule,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Core(#[from] diffrs_core::Error),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Where the data mixture `q_0` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Equal-weight isotropic modes on a circle in 2D.
    Ring {
        modes: usize,
        radius: f64,
        variance: f64,
    },
    /// An inline mixture: `dim` plus `components = [{ weight, mean, cov }]`.
    Mixture(GaussianMixture),
    /// A mixture JSON file; relative paths are resolved against the config file.
    File { path: PathBuf },
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec::Ring {
            modes: 8,
            radius: 2.0,
            variance: 0.09,
        }
    }
}

impl TargetSpec {
    pub fn build(&self) -> Result<GaussianMixture, ConfigError> {
        match self {
            TargetSpec::Ring {
                modes,
                radius,
                variance,
            } => Ok(GaussianMixture::ring(*modes, *radius, *variance)?),
            TargetSpec::Mixture(g) => Ok(g.clone()),
            TargetSpec::File { path } => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Ok(GaussianMixture::from_json(&text)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub rule: BetaRule,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 32,
            beta_start: 1e-3,
            beta_end: 0.25,
            rule: BetaRule::Linear,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule, ConfigError> {
        Ok(make_vp_schedule(
            self.steps,
            self.beta_start,
            self.beta_end,
            self.rule,
        )?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kernel: KernelMode,
    pub variance_rule: VarianceRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    /// Exact ratios from the closed-form marginals.
    #[default]
    Oracle,
    /// The trained discriminator.
    Disc,
}

impl EstimatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorMode::Oracle => "oracle",
            EstimatorMode::Disc => "disc",
        }
    }
}

impl std::str::FromStr for EstimatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(EstimatorMode::Oracle),
            "disc" => Ok(EstimatorMode::Disc),
            other => Err(format!(
                "unknown estimator {other:?} (expected oracle or disc)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    pub mode: EstimatorMode,
    /// Density playing `p_T` in the oracle's prior ratio.
    pub prior: PriorReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    /// Clean samples drawn from each of `q_0` and `p_0^θ`.
    pub n_train: usize,
    /// Hidden layer widths; input and output widths follow from the data.
    pub hidden: Vec<usize>,
    pub time_embedding: TimeEmbedding,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: LambdaRule,
    pub grad_clip: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        let train = diffrs_core::TrainConfig::default();
        Self {
            n_train: 5000,
            hidden: vec![64, 64],
            time_embedding: TimeEmbedding::default(),
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            lambda: train.lambda,
            grad_clip: train.grad_clip,
        }
    }
}

impl DiscriminatorSpec {
    pub fn widths(&self, dim: usize) -> Vec<usize> {
        let mut widths = vec![dim + self.time_embedding.width()];
        widths.extend(&self.hidden);
        widths.push(1);
        widths
    }

    pub fn train_config(&self, seed: u64) -> diffrs_core::TrainConfig {
        diffrs_core::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            grad_clip: self.grad_clip,
            seed,
            ..diffrs_core::TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSpec {
    /// Percentile of the calibration ratios used as rejection constants.
    pub gamma: f64,
    /// Model evaluations allowed per chain attempt; `3·T` when absent.
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub strategies: Vec<Strategy>,
    pub n_chains: usize,
    pub n_calib: usize,
    /// Independent repetitions with seeds `seed, seed + 1, …`.
    pub replicates: usize,
    /// Chains per run that keep a full event log.
    pub event_chains: usize,
    pub max_restarts: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            gamma: 80.0,
            k: None,
            strategies: vec![Strategy::NoRejection, Strategy::FullDiffRS],
            n_chains: 5000,
            n_calib: 1000,
            replicates: 1,
            event_chains: 100,
            max_restarts: diffrs_core::rejection::DEFAULT_MAX_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSpec {
    pub n_projections: usize,
    /// Monte-Carlo trajectories for the bound estimates.
    pub n_mc: usize,
    /// Size of the `q_0` reference set for the sample distances.
    pub n_reference: usize,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            n_projections: 128,
            n_mc: 10_000,
            n_reference: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub gammas: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            gammas: vec![30.0, 50.0, 70.0, 80.0, 85.0, 90.0, 95.0],
        }
    }
}

fn default_name() -> String {
    "run".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_model_error() -> ModelError {
    ModelError::shift(vec![0.5, 0.0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stochastic stage derives its stream from it.
    pub seed: u64,
    /// Run identifier written to the metrics table.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub target: TargetSpec,
    #[serde(default = "default_model_error")]
    pub model_error: ModelError,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub discriminator: DiscriminatorSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub evaluation: EvaluationSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
}

impl ExperimentConfig {
    /// The default benchmark under `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            name: default_name(),
            out_dir: default_out_dir(),
            target: TargetSpec::default(),
            model_error: default_model_error(),
            schedule: ScheduleSpec::default(),
            model: ModelSpec::default(),
            estimator: EstimatorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            sampling: SamplingSpec::default(),
            evaluation: EvaluationSpec::default(),
            sweep: SweepSpec::default(),
        }
    }

    /// Parses TOML text; relative file paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, toml::de::Error> {
        let mut config: Self = toml::from_str(text)?;
        if let TargetSpec::File { path } = &mut config.target {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are TOML-representable")
    }

    /// Model evaluations allowed per attempt.
    pub fn budget(&self) -> usize {
        self.sampling.k.unwrap_or(3 * self.schedule.steps)
    }

    /// Seeds of the replicates.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.sampling.replicates as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    /// Checks every invariant that can be checked without running anything.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check_gamma = |g: f64, what: &str| {
            if (0.0..=100.0).contains(&g) {
                Ok(())
            } else {
                Err(invalid(format!("{what} = {g} is outside [0, 100]")))
            }
        };
        check_gamma(self.sampling.gamma, "sampling.gamma")?;
        for g in &self.sweep.gammas {
            check_gamma(*g, "sweep.gammas entry")?;
        }
        if self.name.is_empty() || self.name.contains([',', '"', '\n']) {
            return Err(invalid(format!(
                "name {:?} must be a plain nonempty label",
                self.name
            )));
        }
        let q0 = self.target.build()?;
        let schedule = self.schedule.build()?;
        let p0 = self.model_error.apply(&q0).map_err(|e| {
            invalid(format!(
                "model_error does not fit a {}-dimensional target: {e}",
                q0.dim()
            ))
        })?;
        DiffusionModel::new(&p0, &schedule, self.model.kernel, self.model.variance_rule)?;

        let s = &self.sampling;
        let positive = [
            (s.n_chains, "sampling.n_chains"),
            (s.replicates, "sampling.replicates"),
            (self.evaluation.n_projections, "evaluation.n_projections"),
            (self.evaluation.n_reference, "evaluation.n_reference"),
            (self.discriminator.n_train, "discriminator.n_train"),
            (self.discriminator.batch_size, "discriminator.batch_size"),
        ];
        for (value, key) in positive {
            if value == 0 {
                return Err(invalid(format!("{key} must be at least 1")));
            }
        }
        if s.n_calib < 2 {
            return Err(invalid("sampling.n_calib must be at least 2"));
        }
        if s.k == Some(0) {
            return Err(invalid("sampling.K must be at least 1"));
        }
        if s.strategies.is_empty() {
            return Err(invalid("sampling.strategies is empty"));
        }
        if self.evaluation.n_mc < diffrs_core::eval::MIN_MC_SAMPLES {
            return Err(invalid(format!(
                "evaluation.n_mc must be at least {}",
                diffrs_core::eval::MIN_MC_SAMPLES
            )));
        }
        if self.discriminator.hidden.contains(&0) {
            return Err(invalid("discriminator.hidden has a zero-width layer"));
        }
        if !(self.discriminator.learning_rate > 0.0 && self.discriminator.learning_rate.is_finite())
        {
            return Err(invalid("discriminator.learning_rate must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory left out.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(canonical.to_toml().as_bytes()))
    }
}

/// Reads, parses and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::from_toml(&text, base).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_the_documented_defaults() {
        let config = ExperimentConfig::from_toml("seed = 7", Path::new(".")).unwrap();
        assert_eq!(config, ExperimentConfig::with_seed(7));
        assert_eq!(config.budget(), 96);
        assert_eq!(config.sampling.gamma, 80.0);
        assert_eq!(config.evaluation.n_projections, 128);
        config.validate().unwrap();
    }

    #[test]
    fn missing_seed_is_named() {
        let err = ExperimentConfig::from_toml("name = \"x\"", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "seed = 1\ncolour = 3",
            "seed = 1\n[sampling]\ngama = 80.0",
            "seed = 1\n[target]\nkind = \"ring\"\nmodes = 8\nradius = 2.0\nvariance = 0.1\nextra = 1",
        ] {
            let err = ExperimentConfig::from_toml(text, Path::new(".")).unwrap_err();
            assert!(err.to_string().contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn type_mismatch_is_an_error() {
        assert!(ExperimentConfig::from_toml("seed = \"one\"", Path::new(".")).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ExperimentConfig::with_seed(1);
        c.sampling.gamma = 101.0;
        assert!(c.validate().unwrap_err().to_string().contains("gamma"));

        let mut c = ExperimentConfig::with_seed(1);
        c.model_error.mean_shift = vec![0.5];
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("model_error"));

        let mut c = ExperimentConfig::with_seed(1);
        c.sampling.n_calib = 1;
        assert!(c.validate().is_err());

        let mut c = ExperimentConfig::with_seed(1);
        c.target = TargetSpec::File {
            path: "/nonexistent/q0.json".into(),
        };
        assert!(c.validate().unwrap_err().to_string().contains("q0.json"));
    }

    #[test]
    fn inline_mixture_target() {
        let text = r#"
seed = 3
[target]
kind = "mixture"
dim = 1
components = [
  { weight = 0.3, mean = [-1.0], cov = [[0.2]] },
  { weight = 0.7, mean = [1.0], cov = [[0.1]] },
]
[model_error]
mean_shift = [0.5]
"#;
        let c = ExperimentConfig::from_toml(text, Path::new(".")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.target.build().unwrap().components().len(), 2);
    }

    #[test]
    fn digest_ignores_the_output_directory() {
        let a = ExperimentConfig::with_seed(1);
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.seed = 2;
        assert_ne!(a.digest(), b.digest());
    }
}
