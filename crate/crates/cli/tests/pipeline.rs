//! The driver end to end on small configurations.

use std::fs;
use std::path::Path;
use std::process::Command as Process;

use diffrs_cli::{execute, parse_config, Command, ExperimentConfig, Stage, TargetSpec};
use diffrs_core::Strategy;

fn small(seed: u64, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::with_seed(seed);
    c.out_dir = out.to_path_buf();
    c.sampling.n_chains = 200;
    c.sampling.n_calib = 150;
    c.sampling.event_chains = 4;
    c.discriminator.n_train = 300;
    c.discriminator.epochs = 1;
    c.evaluation.n_mc = 500;
    c.evaluation.n_reference = 300;
    c.sweep.gammas = vec![30.0, 85.0];
    c
}

#[test]
fn config_survives_a_toml_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(5, &dir.path().join("out"));
    config.sampling.k = Some(70);
    config.sampling.strategies = Strategy::ALL.to_vec();
    let path = dir.path().join("c.toml");
    fs::write(&path, config.to_toml()).unwrap();
    assert_eq!(parse_config(&path).unwrap(), config);
}

#[test]
fn same_config_and_seed_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let config = small(7, &dir.path().join(name));
        execute(&config, Command::Run).unwrap();
        let manifest: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(config.out_dir.join("manifest.json")).unwrap(),
        )
        .unwrap();
        (config.out_dir, manifest)
    };
    let (a, ma) = run("a");
    let (b, mb) = run("b");
    for file in [
        "metrics.csv",
        "samples.csv",
        "events.csv",
        "constants.json",
        "disc.json",
        "bounds.json",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    assert_eq!(ma["files"], mb["files"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
    assert_eq!(ma["partial"], false);
}

#[test]
fn ablation_writes_one_row_per_strategy_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(11, dir.path());
    config.sampling.replicates = 2;
    config.sampling.strategies = Strategy::ALL.to_vec();
    let outcome = execute(&config, Command::Ablate).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * Strategy::ALL.len());
    for seed in [11, 12] {
        for strategy in Strategy::ALL {
            let rows: Vec<_> = outcome
                .metrics
                .iter()
                .filter(|r| r.seed == seed && r.strategy == strategy)
                .collect();
            assert_eq!(rows.len(), 1, "seed {seed} {strategy}");
            assert!(rows[0].mean_nfe >= 32.0);
        }
    }
    assert!(dir.path().join("constants_seed12.json").exists());
}

#[test]
fn sweep_covers_every_percentile() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(13, dir.path());
    config.sampling.strategies = vec![Strategy::FullDiffRS];
    let outcome = execute(&config, Command::SweepGamma).unwrap();
    let gammas: Vec<f64> = outcome.sweep.iter().map(|r| r.gamma).collect();
    assert_eq!(gammas, vec![30.0, 85.0]);
    assert!(outcome.sweep[1].mean_nfe >= outcome.sweep[0].mean_nfe);
}

#[test]
fn failed_stage_is_named_and_leaves_a_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(1, dir.path());
    config.target = TargetSpec::File {
        path: dir.path().join("missing.json"),
    };
    let err = execute(&config, Command::Run).unwrap_err();
    assert_eq!(err.stage, Stage::Setup);
    assert!(err.to_string().contains("stage `setup` failed"), "{err}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["partial"], true);
    assert!(manifest["error"].as_str().unwrap().contains("missing.json"));
}

#[test]
fn binary_reports_errors_through_its_exit_code() {
    let bin = env!("CARGO_BIN_EXE_diffrs");
    let dir = tempfile::tempdir().unwrap();

    let missing_seed = Process::new(bin).arg("run").output().unwrap();
    assert!(!missing_seed.status.success());
    assert!(String::from_utf8_lossy(&missing_seed.stderr).contains("seed"));

    let config = small(2, &dir.path().join("out"));
    let path = dir.path().join("c.toml");
    fs::write(&path, config.to_toml()).unwrap();
    let ok = Process::new(bin)
        .args(["calibrate", "--config"])
        .arg(&path)
        .args(["--gamma", "90"])
        .output()
        .unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    assert!(dir.path().join("out/constants.json").exists());

    let bad_gamma = Process::new(bin)
        .args(["sample", "--config"])
        .arg(&path)
        .args(["--gamma", "101"])
        .output()
        .unwrap();
    assert!(!bad_gamma.status.success());
    assert!(String::from_utf8_lossy(&bad_gamma.stderr).contains("gamma"));
}
