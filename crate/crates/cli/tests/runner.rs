//! End-to-end runner checks: byte-identical reproducibility, scheme
//! structure in the emitted metrics, and IDX ingestion through the
//! experiment path.

use bitfed_cli::config::{DataSource, ExperimentConfig, PartitionKind, Scheme};
use bitfed_cli::experiment::run_experiment;
use bitfed_cli::metrics::read_csv;
use std::path::Path;

/// A configuration small enough for fast end-to-end runs.
fn tiny_config(out_dir: &Path, scheme: Scheme, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.scheme = scheme;
    cfg.out_dir = out_dir.display().to_string();
    cfg.model.layer_dims = vec![20, 8, 4];
    cfg.model.lambda = 0.002;
    cfg.data.classes = 4;
    cfg.data.feature_dim = 20;
    cfg.data.per_class = 60;
    cfg.data.holdout_fraction = 0.1;
    cfg.partition.mode = PartitionKind::Iid;
    cfg.partition.samples_per_device = 35;
    cfg.network.devices = 6;
    cfg.network.max_selected = 3;
    cfg.network.bandwidth_hz = 1e6;
    cfg.network.min_distance_m = 40.0;
    cfg.network.max_distance_m = 120.0;
    cfg.device.rho = 100.0;
    cfg.train.rounds = 12;
    cfg.rl.real_rounds = 6;
    cfg.rl.planning_iterations = 30;
    cfg.rl.levels = 6;
    cfg.rl.bitwidths = vec![4, 8, 16, 32];
    cfg.rl.update_every = 2;
    cfg.bound.steps = 3000;
    cfg.bound.restarts = 3;
    cfg
}

#[test]
fn identical_seeds_give_byte_identical_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("a"), Scheme::FullPrecision, 9);
    let first = run_experiment(&cfg).unwrap();
    let cfg2 = tiny_config(&dir.path().join("b"), Scheme::FullPrecision, 9);
    let second = run_experiment(&cfg2).unwrap();
    let a = std::fs::read(&first.csv_path).unwrap();
    let b = std::fs::read(&second.csv_path).unwrap();
    assert_eq!(a, b, "metrics CSV differs between identical runs");
    let a = std::fs::read(&first.summary_path).unwrap();
    let b = std::fs::read(&second.summary_path).unwrap();
    assert_eq!(a, b, "summary differs between identical runs");
}

#[test]
fn binary_scheme_logs_alpha_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Scheme::Binary, 4);
    let artifacts = run_experiment(&cfg).unwrap();
    let file = read_csv(&artifacts.csv_path).unwrap();
    assert!(!file.records.is_empty());
    for r in &file.records {
        assert_eq!(r.alpha, 1, "round {}: binary scheme must stay at one bit", r.round);
    }
}

#[test]
fn proposed_scheme_shows_phase_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Scheme::Proposed, 5);
    let artifacts = run_experiment(&cfg).unwrap();
    let file = read_csv(&artifacts.csv_path).unwrap();
    let warmup = file.records.iter().filter(|r| r.phase == "warmup").count();
    let deploy = file.records.iter().filter(|r| r.phase == "deploy").count();
    assert_eq!(warmup, 6, "warmup must run exactly the configured real rounds");
    assert!(deploy > 0, "deployment rounds missing");
    // Interactions count every real round and never jump: planning added none.
    for (i, r) in file.records.iter().enumerate() {
        assert_eq!(r.interactions, i + 1);
    }
    // Estimated constants appear exactly when deployment starts.
    assert!(file.records[..warmup].iter().all(|r| r.est.is_none()));
    assert!(file.records[warmup..].iter().all(|r| r.est.is_some()));
    assert_eq!(artifacts.summary.planning_env_rounds, 0);
}

#[test]
fn rounds_are_strictly_increasing_and_delays_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), Scheme::Fixed, 6);
    let artifacts = run_experiment(&cfg).unwrap();
    let file = read_csv(&artifacts.csv_path).unwrap();
    let mut prev_round = 0;
    let mut prev_delay = 0.0;
    for r in &file.records {
        assert!(r.round > prev_round);
        assert!(r.cum_delay_s >= prev_delay);
        assert!(r.num_selected <= cfg.network.max_selected);
        assert!(r.cum_delay_s - prev_delay <= cfg.network.delay_budget_s + 1e-12);
        prev_round = r.round;
        prev_delay = r.cum_delay_s;
    }
    assert_eq!(file.records[0].alpha, cfg.train.fixed_alpha);
}

#[test]
fn idx_dataset_flows_through_the_runner() {
    let dir = tempfile::tempdir().unwrap();
    // Materialize a synthetic dataset as IDX fixture files, then run from
    // them through the idx source path.
    let ds = bitfed_core::datasets::synthetic(4, 16, 50, 3).unwrap();
    let images = dir.path().join("images-idx3-ubyte");
    let labels = dir.path().join("labels-idx1-ubyte");
    bitfed_core::datasets::write_idx(&ds, &images, &labels).unwrap();

    let mut cfg = tiny_config(dir.path(), Scheme::FullPrecision, 2);
    cfg.model.layer_dims = vec![16, 8, 4];
    cfg.data.source = DataSource::Idx;
    cfg.data.images = Some(images.display().to_string());
    cfg.data.labels = Some(labels.display().to_string());
    cfg.partition.samples_per_device = 25;
    cfg.train.rounds = 5;
    let artifacts = run_experiment(&cfg).unwrap();
    assert_eq!(artifacts.summary.rounds_executed, 5);
    assert!(artifacts.summary.final_loss.is_finite());
}
