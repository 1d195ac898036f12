//! Stage-by-stage experiment driver.
//!
//! Every stochastic stage draws from `derive_seed(seed, <stage label>)`, so a
//! (config, seed) pair fixes every output byte except the manifest timestamp.

use std::fmt;
use std::path::PathBuf;

use diffrs_core::eval::BoundEstimate;
use diffrs_core::rejection::Calibration;
use diffrs_core::stats::pearson;
use diffrs_core::{
    calibrate_constants, chain_rng, derive_seed, diffrs_sample, energy_distance, estimate_j,
    estimate_r, final_samples, sliced_wasserstein, summarize_run, train_discriminator, ChainRecord,
    DiffusionModel, DiscriminatorEstimator, DiscriminatorModel, GaussianMixture, LogRatio,
    NoiseSchedule, OracleEstimator, RatioEstimator, RejectionConstants, RunSummary, SampleOptions,
    Strategy, TrainReport,
};
use serde::Serialize;
use thiserror::Error;

use crate::artifacts::{
    self, Manifest, MetricsRow, OutputDir, SampleSet, SummaryEntry, SweepRow, Versions,
};
use crate::config::{EstimatorMode, ExperimentConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Setup,
    GenData,
    TrainDisc,
    Calibrate,
    Sample,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Setup => "setup",
            Stage::GenData => "gen-data",
            Stage::TrainDisc => "train-disc",
            Stage::Calibrate => "calibrate",
            Stage::Sample => "sample",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {source:#}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: anyhow::Error,
}

fn at<T, E: Into<anyhow::Error>>(stage: Stage, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError {
        stage,
        source: e.into(),
    })
}

/// Subcommands of the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// `q0.json`, `p0.json` and the `q_0` reference sets.
    GenData,
    /// `disc.json` and its training report.
    TrainDisc,
    /// Rejection constants.
    Calibrate,
    /// Chains for every configured strategy, with their event log and summaries.
    Sample,
    /// Bound estimates `Ĵ` and `R̂`.
    Eval,
    /// Everything, ending in the metrics table.
    Run,
    /// [`Command::Run`] meant for the full strategy list.
    Ablate,
    /// Distances and NFE over `sweep.gammas`.
    SweepGamma,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDisc => "train-disc",
            Command::Calibrate => "calibrate",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Run => "run",
            Command::Ablate => "ablate",
            Command::SweepGamma => "sweep-gamma",
        }
    }

    fn trains_discriminator(self, mode: EstimatorMode) -> bool {
        matches!(self, Command::TrainDisc | Command::Run | Command::Ablate)
            || mode == EstimatorMode::Disc
    }
}

/// The ratio estimator selected by the configuration.
pub enum Estimator {
    Oracle(OracleEstimator),
    Disc(DiscriminatorEstimator),
}

impl RatioEstimator for Estimator {
    fn log_ratio(&self, x: &[f64], t: usize) -> diffrs_core::Result<LogRatio> {
        match self {
            Estimator::Oracle(e) => e.log_ratio(x, t),
            Estimator::Disc(e) => e.log_ratio(x, t),
        }
    }

    fn log_prior_ratio(&self, x: &[f64]) -> diffrs_core::Result<LogRatio> {
        match self {
            Estimator::Oracle(e) => e.log_prior_ratio(x),
            Estimator::Disc(e) => e.log_prior_ratio(x),
        }
    }

    fn steps(&self) -> usize {
        match self {
            Estimator::Oracle(e) => e.steps(),
            Estimator::Disc(e) => e.steps(),
        }
    }

    fn mode(&self) -> &'static str {
        match self {
            Estimator::Oracle(e) => e.mode(),
            Estimator::Disc(e) => e.mode(),
        }
    }
}

/// A configured problem: data mixture, model and schedule.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub q0: GaussianMixture,
    pub p0: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub model: DiffusionModel,
}

/// Sample-quality scores of one run against the `q_0` reference set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub sw_dist: f64,
    pub energy_dist: f64,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, PipelineError> {
        at(Stage::Setup, config.validate())?;
        let q0 = at(Stage::Setup, config.target.build())?;
        let p0 = at(Stage::Setup, config.model_error.apply(&q0))?;
        let schedule = at(Stage::Setup, config.schedule.build())?;
        let model = at(
            Stage::Setup,
            DiffusionModel::new(
                &p0,
                &schedule,
                config.model.kernel,
                config.model.variance_rule,
            ),
        )?;
        Ok(Self {
            config,
            q0,
            p0,
            schedule,
            model,
        })
    }

    pub fn oracle(&self) -> diffrs_core::Result<OracleEstimator> {
        OracleEstimator::new(
            &self.q0,
            &self.p0,
            &self.schedule,
            self.config.estimator.prior,
        )
    }

    /// `n_reference` draws from `q_0` for scoring the runs of `seed`.
    pub fn reference(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = chain_rng(derive_seed(seed, "reference"), 0);
        self.q0.sample(&mut rng, self.config.evaluation.n_reference)
    }

    /// Trains on clean draws from `q_0` (real) and `p_0^θ` (fake) and measures the
    /// correlation of its logits with the exact log-ratio at mid timesteps.
    pub fn train_discriminator(&self) -> diffrs_core::Result<(DiscriminatorModel, TrainReport)> {
        let spec = &self.config.discriminator;
        let seed = self.config.seed;
        let n = spec.n_train;
        let real = self
            .q0
            .sample(&mut chain_rng(derive_seed(seed, "disc-real"), 0), n);
        let fake = self
            .p0
            .sample(&mut chain_rng(derive_seed(seed, "disc-fake"), 0), n);
        let init = DiscriminatorModel::init(
            self.q0.dim(),
            &spec.widths(self.q0.dim()),
            spec.time_embedding,
            derive_seed(seed, "disc-init"),
        )?;
        let cfg = spec.train_config(derive_seed(seed, "disc-train"));
        let (model, mut report) = train_discriminator(init, &real, &fake, &self.schedule, &cfg)?;
        report.oracle_correlation = Some(self.oracle_correlation(&model)?);
        Ok((model, report))
    }

    /// Pearson correlation between logits and exact log-ratios over perturbed
    /// draws of both streams at `t ∈ [T/4, 3T/4]`.
    pub fn oracle_correlation(&self, model: &DiscriminatorModel) -> diffrs_core::Result<f64> {
        let oracle = self.oracle()?;
        let steps = self.schedule.steps();
        let (lo, hi) = ((steps / 4).max(1), (3 * steps / 4).max(1));
        let mut rng = chain_rng(derive_seed(self.config.seed, "disc-probe"), 0);
        let (mut z, mut exact) = (Vec::new(), Vec::new());
        for t in lo..=hi {
            for source in [&self.q0, &self.p0] {
                for _ in 0..200 {
                    let x0 = source.sample_one(&mut rng);
                    let x = self.schedule.forward_perturb(&x0, t, &mut rng)?;
                    z.push(model.logit(&x, t, &self.schedule)?);
                    exact.push(oracle.log_ratio(&x, t)?.value());
                }
            }
        }
        Ok(pearson(&z, &exact))
    }

    pub fn estimator(&self, disc: Option<&DiscriminatorModel>) -> anyhow::Result<Estimator> {
        match (self.config.estimator.mode, disc) {
            (EstimatorMode::Oracle, _) => Ok(Estimator::Oracle(self.oracle()?)),
            (EstimatorMode::Disc, Some(m)) => Ok(Estimator::Disc(DiscriminatorEstimator::new(
                m.clone(),
                self.schedule.clone(),
            ))),
            (EstimatorMode::Disc, None) => {
                anyhow::bail!("the disc estimator needs a trained discriminator")
            }
        }
    }

    pub fn calibrate<R: RatioEstimator + ?Sized>(
        &self,
        estimator: &R,
        seed: u64,
    ) -> diffrs_core::Result<Calibration> {
        calibrate_constants(
            &self.model,
            estimator,
            self.config.sampling.n_calib,
            self.config.sampling.gamma,
            Some(self.config.budget()),
            derive_seed(seed, "calibrate"),
        )
    }

    /// All strategies of one seed share the sampling stream.
    pub fn sample<R: RatioEstimator + ?Sized>(
        &self,
        estimator: &R,
        constants: &RejectionConstants,
        strategy: Strategy,
        seed: u64,
        event_chains: usize,
    ) -> diffrs_core::Result<Vec<ChainRecord>> {
        let s = &self.config.sampling;
        let opts = SampleOptions {
            max_restarts: s.max_restarts,
            event_chains,
            ..SampleOptions::new(strategy, s.n_chains, derive_seed(seed, "sample"))
        };
        diffrs_sample(&self.model, estimator, constants, &opts)
    }

    pub fn score(
        &self,
        records: &[ChainRecord],
        reference: &[Vec<f64>],
        seed: u64,
    ) -> diffrs_core::Result<Scores> {
        let samples = final_samples(records);
        Ok(Scores {
            sw_dist: sliced_wasserstein(
                &samples,
                reference,
                self.config.evaluation.n_projections,
                derive_seed(seed, "projections"),
            )?,
            energy_dist: energy_distance(&samples, reference)?,
        })
    }

    /// `(Ĵ, R̂)` for `seed`; `Ĵ` uses the exact densities of the model.
    pub fn bounds<R: RatioEstimator + ?Sized>(
        &self,
        estimator: &R,
        seed: u64,
    ) -> diffrs_core::Result<(BoundEstimate, BoundEstimate)> {
        let n_mc = self.config.evaluation.n_mc;
        let j = estimate_j(
            &self.q0,
            &self.model,
            self.config.estimator.prior,
            n_mc,
            derive_seed(seed, "bound-j"),
        )?;
        let r = estimate_r(
            &self.q0,
            &self.schedule,
            estimator,
            n_mc,
            derive_seed(seed, "bound-r"),
        )?;
        Ok((j, r))
    }
}

/// One seed's bound estimates, as written to `bounds.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsEntry {
    pub seed: u64,
    pub estimator_mode: String,
    #[serde(rename = "J")]
    pub j: BoundEstimate,
    #[serde(rename = "R")]
    pub r: BoundEstimate,
}

/// What a command produced, for callers that want the numbers as well as the files.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub sweep: Vec<SweepRow>,
    pub summaries: Vec<SummaryEntry>,
    pub bounds: Vec<BoundsEntry>,
    pub train_report: Option<TrainReport>,
}

struct Driver<'a> {
    experiment: &'a Experiment,
    command: Command,
    out: OutputDir,
    completed: Vec<Stage>,
    outcome: RunOutcome,
    events_strategy: Option<Strategy>,
}

/// Runs `command` and writes its artifacts plus `manifest.json` into `config.out_dir`.
///
/// On failure the manifest is still written, flagged partial, with the failing stage.
pub fn execute(config: &ExperimentConfig, command: Command) -> Result<RunOutcome, PipelineError> {
    let mut out = at(Stage::Setup, OutputDir::create(&config.out_dir))?;
    let experiment = match Experiment::new(config.clone()) {
        Ok(e) => e,
        Err(e) => {
            let manifest = manifest(config, command, &[], None, &out, Some(e.to_string()));
            out.write_json(artifacts::MANIFEST_FILE, &manifest)
                .map_err(|w| PipelineError {
                    stage: Stage::Write,
                    source: w,
                })?;
            return Err(e);
        }
    };
    let mut driver = Driver {
        experiment: &experiment,
        command,
        out,
        completed: vec![Stage::Setup],
        outcome: RunOutcome {
            out_dir: config.out_dir.clone(),
            ..RunOutcome::default()
        },
        events_strategy: None,
    };
    let result = driver.run();
    let error = result.as_ref().err().map(ToString::to_string);
    let manifest = driver.manifest(error);
    let written = at(
        Stage::Write,
        driver.out.write_json(artifacts::MANIFEST_FILE, &manifest),
    );
    result?;
    written?;
    Ok(driver.outcome)
}

impl Driver<'_> {
    fn config(&self) -> &ExperimentConfig {
        &self.experiment.config
    }

    fn done(&mut self, stage: Stage) {
        if !self.completed.contains(&stage) {
            self.completed.push(stage);
        }
    }

    fn run(&mut self) -> Result<(), PipelineError> {
        let exp = self.experiment;
        if self.command == Command::GenData {
            return self.gen_data();
        }
        let disc = if self
            .command
            .trains_discriminator(self.config().estimator.mode)
        {
            let (model, report) = at(Stage::TrainDisc, exp.train_discriminator())?;
            at(
                Stage::Write,
                model
                    .to_checkpoint_json()
                    .map_err(anyhow::Error::from)
                    .and_then(|json| {
                        self.out
                            .write_bytes(artifacts::DISC_FILE, json.as_bytes())?;
                        Ok(())
                    }),
            )?;
            at(
                Stage::Write,
                self.out.write_json(artifacts::TRAIN_REPORT_FILE, &report),
            )?;
            self.outcome.train_report = Some(report);
            self.done(Stage::TrainDisc);
            Some(model)
        } else {
            None
        };
        let estimator = at(Stage::Setup, exp.estimator(disc.as_ref()))?;
        match self.command {
            Command::GenData | Command::TrainDisc => Ok(()),
            Command::Eval => self.eval(&estimator),
            Command::Calibrate => {
                for (i, seed) in self.config().seeds().into_iter().enumerate() {
                    let calibration = at(Stage::Calibrate, exp.calibrate(&estimator, seed))?;
                    self.write_constants(i, seed, &calibration.constants)?;
                }
                self.done(Stage::Calibrate);
                Ok(())
            }
            Command::Sample | Command::Run | Command::Ablate => self.sample_and_score(&estimator),
            Command::SweepGamma => self.sweep(&estimator),
        }
    }

    fn gen_data(&mut self) -> Result<(), PipelineError> {
        let exp = self.experiment;
        at(
            Stage::Write,
            self.out.write_json(artifacts::TARGET_FILE, &exp.q0),
        )?;
        at(
            Stage::Write,
            self.out.write_json(artifacts::MODEL_FILE, &exp.p0),
        )?;
        let sets: Vec<(u64, Vec<Vec<f64>>)> = self
            .config()
            .seeds()
            .into_iter()
            .map(|seed| (seed, exp.reference(seed)))
            .collect();
        at(
            Stage::Write,
            self.out.write_points(artifacts::REFERENCE_FILE, &sets),
        )?;
        self.done(Stage::GenData);
        Ok(())
    }

    fn eval(&mut self, estimator: &Estimator) -> Result<(), PipelineError> {
        for seed in self.config().seeds() {
            let (j, r) = at(Stage::Evaluate, self.experiment.bounds(estimator, seed))?;
            self.outcome.bounds.push(BoundsEntry {
                seed,
                estimator_mode: estimator.mode().to_string(),
                j,
                r,
            });
        }
        self.done(Stage::Evaluate);
        at(
            Stage::Write,
            self.out
                .write_json(artifacts::BOUNDS_FILE, &self.outcome.bounds),
        )
    }

    /// `constants.json` for the first seed, `constants_seed<N>.json` for the others.
    fn write_constants(
        &mut self,
        index: usize,
        seed: u64,
        constants: &RejectionConstants,
    ) -> Result<(), PipelineError> {
        let name = if index == 0 {
            artifacts::CONSTANTS_FILE.to_string()
        } else {
            format!("constants_seed{seed}.json")
        };
        at(Stage::Write, self.out.write_constants(&name, constants))
    }

    /// The strategy whose event log is kept: the first one that rejects anything.
    fn pick_events_strategy(strategies: &[Strategy]) -> Option<Strategy> {
        strategies
            .iter()
            .copied()
            .find(|s| *s != Strategy::NoRejection)
            .or(strategies.first().copied())
    }

    fn sample_and_score(&mut self, estimator: &Estimator) -> Result<(), PipelineError> {
        let exp = self.experiment;
        let config = self.config().clone();
        let strategies = config.sampling.strategies.clone();
        self.events_strategy = Self::pick_events_strategy(&strategies);
        let with_metrics = self.command != Command::Sample;
        let mut event_records: Vec<ChainRecord> = Vec::new();
        let mut runs: Vec<(u64, Strategy, Vec<ChainRecord>)> = Vec::new();

        for (i, seed) in config.seeds().into_iter().enumerate() {
            let calibration = at(Stage::Calibrate, exp.calibrate(estimator, seed))?;
            self.write_constants(i, seed, &calibration.constants)?;
            self.done(Stage::Calibrate);

            let reference = with_metrics.then(|| exp.reference(seed));
            let bounds = if with_metrics {
                Some(at(Stage::Evaluate, exp.bounds(estimator, seed))?)
            } else {
                None
            };
            for &strategy in &strategies {
                let keep_events = i == 0 && Some(strategy) == self.events_strategy;
                let event_chains = if keep_events {
                    config.sampling.event_chains
                } else {
                    0
                };
                let records = at(
                    Stage::Sample,
                    exp.sample(
                        estimator,
                        &calibration.constants,
                        strategy,
                        seed,
                        event_chains,
                    ),
                )?;
                let summary = at(Stage::Evaluate, summarize_run(&records))?;
                if let (Some(reference), Some((j, r))) = (&reference, &bounds) {
                    let scores = at(Stage::Evaluate, exp.score(&records, reference, seed))?;
                    self.outcome.metrics.push(metrics_row(
                        &config,
                        seed,
                        strategy,
                        config.sampling.gamma,
                        estimator,
                        &summary,
                        scores,
                        j,
                        r,
                    ));
                }
                self.outcome.summaries.push(SummaryEntry {
                    seed,
                    strategy,
                    gamma: config.sampling.gamma,
                    summary,
                });
                if keep_events {
                    event_records = records
                        .iter()
                        .take(config.sampling.event_chains)
                        .cloned()
                        .collect();
                }
                runs.push((seed, strategy, strip_events(records)));
            }
            if let Some((j, r)) = bounds {
                self.outcome.bounds.push(BoundsEntry {
                    seed,
                    estimator_mode: estimator.mode().to_string(),
                    j,
                    r,
                });
            }
        }
        self.done(Stage::Sample);
        if with_metrics {
            self.done(Stage::Evaluate);
        }

        let sets: Vec<SampleSet<'_>> = runs
            .iter()
            .map(|(seed, strategy, records)| SampleSet {
                seed: *seed,
                strategy: *strategy,
                records,
            })
            .collect();
        at(Stage::Write, self.out.write_samples(&sets))?;
        at(Stage::Write, self.out.write_events(&event_records))?;
        at(
            Stage::Write,
            self.out
                .write_json(artifacts::SUMMARY_FILE, &self.outcome.summaries),
        )?;
        if with_metrics {
            at(Stage::Write, self.out.write_metrics(&self.outcome.metrics))?;
            at(
                Stage::Write,
                self.out
                    .write_json(artifacts::BOUNDS_FILE, &self.outcome.bounds),
            )?;
        }
        Ok(())
    }

    fn sweep(&mut self, estimator: &Estimator) -> Result<(), PipelineError> {
        let exp = self.experiment;
        let config = self.config().clone();
        for (i, seed) in config.seeds().into_iter().enumerate() {
            let calibration = at(Stage::Calibrate, exp.calibrate(estimator, seed))?;
            self.write_constants(i, seed, &calibration.constants)?;
            self.done(Stage::Calibrate);
            let reference = exp.reference(seed);
            let (j, r) = at(Stage::Evaluate, exp.bounds(estimator, seed))?;
            for &gamma in &config.sweep.gammas {
                let constants = at(Stage::Calibrate, calibration.with_gamma(gamma))?.constants;
                for &strategy in &config.sampling.strategies {
                    let records = at(
                        Stage::Sample,
                        exp.sample(estimator, &constants, strategy, seed, 0),
                    )?;
                    let summary = at(Stage::Evaluate, summarize_run(&records))?;
                    let scores = at(Stage::Evaluate, exp.score(&records, &reference, seed))?;
                    self.outcome.metrics.push(metrics_row(
                        &config, seed, strategy, gamma, estimator, &summary, scores, &j, &r,
                    ));
                    self.outcome.sweep.push(SweepRow {
                        seed,
                        strategy,
                        gamma,
                        mean_nfe: summary.mean_nfe_model,
                        std_nfe: summary.std_nfe_model,
                        mean_disc_nfe: summary.mean_nfe_disc,
                        sw_dist: scores.sw_dist,
                        energy_dist: scores.energy_dist,
                        violation_rate: summary.violation_rate,
                        restarts: summary.restarts,
                    });
                    self.outcome.summaries.push(SummaryEntry {
                        seed,
                        strategy,
                        gamma,
                        summary,
                    });
                }
            }
        }
        self.done(Stage::Sample);
        self.done(Stage::Evaluate);
        at(Stage::Write, self.out.write_metrics(&self.outcome.metrics))?;
        at(Stage::Write, self.out.write_sweep(&self.outcome.sweep))?;
        at(
            Stage::Write,
            self.out
                .write_json(artifacts::SUMMARY_FILE, &self.outcome.summaries),
        )
    }

    fn manifest(&self, error: Option<String>) -> Manifest {
        manifest(
            self.config(),
            self.command,
            &self.completed,
            self.events_strategy,
            &self.out,
            error,
        )
    }
}

fn manifest(
    config: &ExperimentConfig,
    command: Command,
    completed: &[Stage],
    events_strategy: Option<Strategy>,
    out: &OutputDir,
    error: Option<String>,
) -> Manifest {
    Manifest {
        command: command.name().to_string(),
        run_id: config.name.clone(),
        config_sha256: config.digest(),
        config: config.clone(),
        versions: Versions::default(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        gamma: config.sampling.gamma,
        k: config.budget(),
        estimator: config.estimator.mode.as_str().to_string(),
        strategies: config.sampling.strategies.clone(),
        seeds: config.seeds(),
        events_strategy,
        completed_stages: completed.to_vec(),
        partial: error.is_some(),
        error,
        files: out.written().clone(),
    }
}

fn strip_events(mut records: Vec<ChainRecord>) -> Vec<ChainRecord> {
    for r in &mut records {
        r.events = Vec::new();
    }
    records
}

#[allow(clippy::too_many_arguments)]
fn metrics_row(
    config: &ExperimentConfig,
    seed: u64,
    strategy: Strategy,
    gamma: f64,
    estimator: &Estimator,
    summary: &RunSummary,
    scores: Scores,
    j: &BoundEstimate,
    r: &BoundEstimate,
) -> MetricsRow {
    MetricsRow {
        run_id: config.name.clone(),
        seed,
        strategy,
        gamma,
        estimator_mode: estimator.mode().to_string(),
        mean_nfe: summary.mean_nfe_model,
        mean_disc_nfe: summary.mean_nfe_disc,
        sw_dist: scores.sw_dist,
        energy_dist: scores.energy_dist,
        j_hat: j.value,
        j_se: j.mc_std_error,
        r_hat: r.value,
        r_se: r.mc_std_error,
        violation_rate: summary.violation_rate,
    }
}
