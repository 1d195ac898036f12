//! Output files of a run. Every writer is deterministic given its inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffrs_core::{ChainRecord, RejectionConstants, RunSummary, Strategy};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const CONSTANTS_FILE: &str = "constants.json";
pub const DISC_FILE: &str = "disc.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BOUNDS_FILE: &str = "bounds.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const TARGET_FILE: &str = "q0.json";
pub const MODEL_FILE: &str = "p0.json";
pub const REFERENCE_FILE: &str = "reference.csv";

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub strategy: Strategy,
    pub gamma: f64,
    pub estimator_mode: String,
    pub mean_nfe: f64,
    pub mean_disc_nfe: f64,
    pub sw_dist: f64,
    pub energy_dist: f64,
    #[serde(rename = "J_hat")]
    pub j_hat: f64,
    #[serde(rename = "J_se")]
    pub j_se: f64,
    #[serde(rename = "R_hat")]
    pub r_hat: f64,
    #[serde(rename = "R_se")]
    pub r_se: f64,
    pub violation_rate: f64,
}

/// One row of the percentile sweep: the NFE/distance trade-off at one γ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub strategy: Strategy,
    pub gamma: f64,
    pub mean_nfe: f64,
    pub std_nfe: f64,
    pub mean_disc_nfe: f64,
    pub sw_dist: f64,
    pub energy_dist: f64,
    pub violation_rate: f64,
    pub restarts: usize,
}

/// Run summary tagged with the run it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryEntry {
    pub seed: u64,
    pub strategy: Strategy,
    pub gamma: f64,
    pub summary: RunSummary,
}

/// Final samples of one (seed, strategy) run.
pub struct SampleSet<'a> {
    pub seed: u64,
    pub strategy: Strategy,
    pub records: &'a [ChainRecord],
}

/// Collects written files so the manifest can list their digests.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// File names written so far, with their SHA-256.
    pub fn written(&self) -> &BTreeMap<String, String> {
        &self.written
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        fs::write(self.path(name), bytes)?;
        self.written
            .insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(
        &mut self,
        name: &str,
        value: &T,
    ) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())?;
        Ok(())
    }

    fn write_csv(
        &mut self,
        name: &str,
        header: &[String],
        rows: &[Vec<String>],
    ) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.write_bytes(name, &bytes)?;
        Ok(())
    }

    fn write_serialized_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.write_bytes(name, &bytes)?;
        Ok(())
    }

    pub fn write_metrics(&mut self, rows: &[MetricsRow]) -> anyhow::Result<()> {
        self.write_serialized_csv(METRICS_FILE, rows)
    }

    pub fn write_sweep(&mut self, rows: &[SweepRow]) -> anyhow::Result<()> {
        self.write_serialized_csv(SWEEP_FILE, rows)
    }

    pub fn write_constants(
        &mut self,
        name: &str,
        constants: &RejectionConstants,
    ) -> anyhow::Result<()> {
        self.write_json(name, constants)
    }

    /// `chain_id, step_index, t, kind, log_L`; `log_L` is empty where no ratio was computed.
    pub fn write_events(&mut self, records: &[ChainRecord]) -> anyhow::Result<()> {
        let header = ["chain_id", "step_index", "t", "kind", "log_L"].map(String::from);
        let rows: Vec<Vec<String>> = records
            .iter()
            .flat_map(|r| {
                r.events.iter().enumerate().map(move |(i, e)| {
                    vec![
                        r.chain_id.to_string(),
                        i.to_string(),
                        e.t.to_string(),
                        e.kind.as_str().to_string(),
                        e.log_l.map(|v| v.to_string()).unwrap_or_default(),
                    ]
                })
            })
            .collect();
        self.write_csv(EVENTS_FILE, &header, &rows)
    }

    /// `seed, strategy, chain_id, nfe_model, nfe_disc, x0, x1, …`.
    pub fn write_samples(&mut self, sets: &[SampleSet<'_>]) -> anyhow::Result<()> {
        let dim = sets
            .iter()
            .flat_map(|s| s.records.first())
            .map(|r| r.x.len())
            .next()
            .unwrap_or(0);
        let mut header: Vec<String> = ["seed", "strategy", "chain_id", "nfe_model", "nfe_disc"]
            .map(String::from)
            .to_vec();
        header.extend((0..dim).map(|i| format!("x{i}")));
        let rows: Vec<Vec<String>> = sets
            .iter()
            .flat_map(|s| {
                s.records.iter().map(move |r| {
                    let mut row = vec![
                        s.seed.to_string(),
                        s.strategy.to_string(),
                        r.chain_id.to_string(),
                        r.nfe_model.to_string(),
                        r.nfe_disc.to_string(),
                    ];
                    row.extend(r.x.iter().map(|v| v.to_string()));
                    row
                })
            })
            .collect();
        self.write_csv(SAMPLES_FILE, &header, &rows)
    }

    /// `seed, x0, x1, …`.
    pub fn write_points(
        &mut self,
        name: &str,
        sets: &[(u64, Vec<Vec<f64>>)],
    ) -> anyhow::Result<()> {
        let dim = sets
            .iter()
            .flat_map(|(_, pts)| pts.first())
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        let mut header = vec!["seed".to_string()];
        header.extend((0..dim).map(|i| format!("x{i}")));
        let rows: Vec<Vec<String>> = sets
            .iter()
            .flat_map(|(seed, pts)| {
                pts.iter().map(move |x| {
                    let mut row = vec![seed.to_string()];
                    row.extend(x.iter().map(|v| v.to_string()));
                    row
                })
            })
            .collect();
        self.write_csv(name, &header, &rows)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub diffrs_core: &'static str,
    pub diffrs_cli: &'static str,
    pub checkpoint_format: &'static str,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            diffrs_core: diffrs_core::VERSION,
            diffrs_cli: env!("CARGO_PKG_VERSION"),
            checkpoint_format: diffrs_core::discriminator::CHECKPOINT_VERSION,
        }
    }
}

/// Everything needed to reconstruct a table row, plus the run's completion state.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub config_sha256: String,
    pub config: crate::config::ExperimentConfig,
    pub versions: Versions,
    pub timestamp: String,
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub estimator: String,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    /// Strategy whose first-seed chains are in the event log.
    pub events_strategy: Option<Strategy>,
    pub completed_stages: Vec<crate::pipeline::Stage>,
    /// True when a stage failed and the outputs are incomplete.
    pub partial: bool,
    pub error: Option<String>,
    /// SHA-256 of every other file in the directory.
    pub files: BTreeMap<String, String>,
}
