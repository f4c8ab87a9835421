//! Experiment configuration: a nested key-value (TOML) file merged with
//! command-line overrides, validated before any work starts.
//!
//! Defaults follow the reference simulation parameters (M = 15, U = 6,
//! Gamma = 1 s, W = 15 kHz, P = 0.5 W, noise -174 dBm, f = 3.3 GHz,
//! theta = 64 bits/cycle, rho = 2.8e6, N_m = 200, T = 1000, I = 20, and
//! 0.02 learning rates). Note that with the reference rho and W the delay
//! model admits no feasible action at Gamma = 1 s, so runnable experiments
//! use a scaled device profile such as `configs/desk.toml`.

use crate::{CliError, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Model-based scheduler (warmup, bound regression, planning, deploy).
    Proposed,
    /// Policy-gradient scheduler learning from real rounds only.
    ModelFree,
    /// Random selection at a pinned bitwidth of 1.
    Binary,
    /// Random selection at full precision.
    FullPrecision,
    /// Random selection at `train.fixed_alpha`.
    Fixed,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::ModelFree => "model-free",
            Scheme::Binary => "binary",
            Scheme::FullPrecision => "full-precision",
            Scheme::Fixed => "fixed",
        }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_out_dir() -> String {
    "runs".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Neuron widths, input to output.
    pub layer_dims: Vec<usize>,
    /// Full-precision bitwidth V.
    pub full_bitwidth: u32,
    /// Local SGD step size (applied to the summed minibatch gradient).
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // The reference fully-connected network: 784-256-64-10, 217728
        // parameters.
        Self { layer_dims: vec![784, 256, 64, 10], full_bitwidth: 32, lambda: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic generator knobs.
    pub classes: usize,
    pub feature_dim: usize,
    pub per_class: usize,
    pub data_seed: u64,
    /// IDX file paths (big-endian, magics 0x00000803 / 0x00000801).
    pub images: Option<String>,
    pub labels: Option<String>,
    /// Held-out fraction never partitioned to devices.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 10,
            feature_dim: 784,
            per_class: 340,
            data_seed: 1,
            images: None,
            labels: None,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub mode: PartitionKind,
    pub labels_per_device: usize,
    /// Samples per device (N_m). 0 in i.i.d. mode splits the whole pool.
    pub samples_per_device: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { mode: PartitionKind::Noniid, labels_per_device: 3, samples_per_device: 200 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Device count M.
    pub devices: usize,
    /// RB budget U.
    pub max_selected: usize,
    /// Per-iteration delay budget Gamma in seconds.
    pub delay_budget_s: f64,
    /// RB bandwidth W in Hz.
    pub bandwidth_hz: f64,
    /// Noise power in dBm.
    pub noise_dbm: f64,
    /// Transmission size D in parameters; 0 derives it from the model.
    pub tx_size_params: u64,
    /// Multiplication count N^C; 0 derives it from the model.
    pub mult_ops: u64,
    /// Path-loss gain at the reference distance.
    pub ref_gain: f64,
    pub ref_distance_m: f64,
    /// Device distances are drawn uniformly from this ring.
    pub min_distance_m: f64,
    pub max_distance_m: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            devices: 15,
            max_selected: 6,
            delay_budget_s: 1.0,
            bandwidth_hz: 15_000.0,
            noise_dbm: -174.0,
            tx_size_params: 0,
            mult_ops: 0,
            ref_gain: 1e-3,
            ref_distance_m: 1.0,
            min_distance_m: 50.0,
            max_distance_m: 1500.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    /// Time-consumption coefficient rho.
    pub rho: f64,
    /// CPU frequency f in Hz.
    pub cpu_hz: f64,
    /// Bits per CPU cycle theta.
    pub bits_per_cycle: f64,
    /// Transmit power P in watts.
    pub tx_power_w: f64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        Self { rho: 2.8e6, cpu_hz: 3.3e9, bits_per_cycle: 64.0, tx_power_w: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Round budget T.
    pub rounds: usize,
    /// Per-round minibatch size; 0 trains on the full local set.
    pub minibatch: usize,
    pub convergence_window: usize,
    pub convergence_variance: f64,
    /// Bitwidth of the `fixed` scheme.
    pub fixed_alpha: u32,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            rounds: 1000,
            minibatch: 0,
            convergence_window: 20,
            convergence_variance: 0.001,
            fixed_alpha: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSection {
    /// Real-interaction budget I of the model-based scheme.
    pub real_rounds: usize,
    /// Planning iterations H.
    pub planning_iterations: usize,
    pub plan_trajectories: usize,
    pub plan_horizon: usize,
    pub plan_batch: usize,
    pub replay_capacity: usize,
    /// Policy learning rate iota.
    pub iota: f64,
    /// State-space levels |S|.
    pub levels: usize,
    /// Candidate bitwidths; empty uses {1, 2, 4, 8, 16, V}.
    pub bitwidths: Vec<u32>,
    /// Model-free rounds per policy update.
    pub update_every: usize,
    /// Mean-reward baseline subtraction (variance reduction), default off.
    pub baseline: bool,
    /// Re-estimate the bound every this many deployed rounds (0 = off).
    pub reestimate_every: usize,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            real_rounds: 20,
            planning_iterations: 500,
            plan_trajectories: 4,
            plan_horizon: 10,
            plan_batch: 8,
            replay_capacity: 256,
            iota: 0.02,
            levels: 20,
            bitwidths: Vec::new(),
            update_every: 5,
            baseline: false,
            reestimate_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSection {
    pub rate_l: f64,
    pub rate_zeta1: f64,
    pub rate_zeta2: f64,
    pub rate_beps2: f64,
    pub steps: usize,
    pub restarts: usize,
    pub init_l: f64,
    pub init_zeta1: f64,
    pub init_zeta2: f64,
    pub init_beps2: f64,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            rate_l: 0.02,
            rate_zeta1: 0.02,
            rate_zeta2: 0.02,
            rate_beps2: 0.02,
            steps: 60_000,
            restarts: 8,
            init_l: 1.0,
            init_zeta1: 1.0,
            init_zeta2: 1.0,
            init_beps2: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheme: Scheme,
    pub out_dir: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub partition: PartitionConfig,
    pub network: NetworkSection,
    pub device: DeviceSection,
    pub train: TrainSection,
    pub rl: RlSection,
    pub bound: BoundSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            scheme: Scheme::FullPrecision,
            out_dir: default_out_dir(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            partition: PartitionConfig::default(),
            network: NetworkSection::default(),
            device: DeviceSection::default(),
            train: TrainSection::default(),
            rl: RlSection::default(),
            bound: BoundSection::default(),
        }
    }
}

/// Command-line overrides; flags take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scheme: Option<Scheme>,
    pub alpha: Option<u32>,
    pub devices: Option<usize>,
    pub rounds: Option<usize>,
    pub minibatch: Option<usize>,
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    /// Parse a config file (when given) and apply flag overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg: ExperimentConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(scheme) = overrides.scheme {
            cfg.scheme = scheme;
        }
        if let Some(alpha) = overrides.alpha {
            cfg.train.fixed_alpha = alpha;
        }
        if let Some(devices) = overrides.devices {
            cfg.network.devices = devices;
        }
        if let Some(rounds) = overrides.rounds {
            cfg.train.rounds = rounds;
        }
        if let Some(minibatch) = overrides.minibatch {
            cfg.train.minibatch = minibatch;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parameter count of the configured model (weights only).
    pub fn derived_param_count(&self) -> u64 {
        self.model
            .layer_dims
            .windows(2)
            .map(|w| (w[0] * w[1]) as u64)
            .sum()
    }

    pub fn tx_size_params(&self) -> u64 {
        if self.network.tx_size_params > 0 {
            self.network.tx_size_params
        } else {
            self.derived_param_count()
        }
    }

    pub fn mult_ops(&self) -> u64 {
        if self.network.mult_ops > 0 {
            self.network.mult_ops
        } else {
            self.derived_param_count()
        }
    }

    pub fn bitwidths(&self) -> Vec<u32> {
        if self.rl.bitwidths.is_empty() {
            bitfed_core::rl::ModelBasedConfig::default_bitwidths(self.model.full_bitwidth)
        } else {
            let mut set: Vec<u32> = self
                .rl
                .bitwidths
                .iter()
                .copied()
                .filter(|&a| a >= 1 && a <= self.model.full_bitwidth)
                .collect();
            set.sort_unstable();
            set.dedup();
            set
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CliError::Config(msg));
        if self.network.devices < 1 {
            return fail("network.devices must be >= 1".into());
        }
        if self.network.max_selected > self.network.devices {
            return fail(format!(
                "network.max_selected ({}) exceeds network.devices ({})",
                self.network.max_selected, self.network.devices
            ));
        }
        if self.network.max_selected < 1 {
            return fail("network.max_selected must be >= 1".into());
        }
        if self.model.layer_dims.len() < 2 {
            return fail("model.layer_dims needs at least input and output widths".into());
        }
        if self.model.full_bitwidth < 2 || self.model.full_bitwidth > 52 {
            return fail(format!(
                "model.full_bitwidth must be in [2, 52], got {}",
                self.model.full_bitwidth
            ));
        }
        if self.train.fixed_alpha < 1 || self.train.fixed_alpha > self.model.full_bitwidth {
            return fail(format!(
                "train.fixed_alpha ({}) outside [1, {}]",
                self.train.fixed_alpha, self.model.full_bitwidth
            ));
        }
        if !(self.model.lambda > 0.0) {
            return fail("model.lambda must be positive".into());
        }
        if !(self.network.delay_budget_s > 0.0) {
            return fail("network.delay_budget_s must be positive".into());
        }
        if !(self.data.holdout_fraction >= 0.0 && self.data.holdout_fraction < 1.0) {
            return fail("data.holdout_fraction must be in [0, 1)".into());
        }
        if self.partition.mode == PartitionKind::Noniid {
            if self.partition.labels_per_device < 1
                || self.partition.labels_per_device > self.data.classes
            {
                return fail(format!(
                    "partition.labels_per_device ({}) outside [1, {} classes]",
                    self.partition.labels_per_device, self.data.classes
                ));
            }
            if self.partition.samples_per_device < 1 {
                return fail("partition.samples_per_device must be >= 1 in noniid mode".into());
            }
        }
        if self.data.source == DataSource::Idx
            && (self.data.images.is_none() || self.data.labels.is_none())
        {
            return fail("data.source = idx requires data.images and data.labels paths".into());
        }
        if self.rl.levels < 2 {
            return fail("rl.levels must be >= 2".into());
        }
        if self.rl.update_every < 1 {
            return fail("rl.update_every must be >= 1".into());
        }
        for (name, v) in [
            ("device.rho", self.device.rho),
            ("device.cpu_hz", self.device.cpu_hz),
            ("device.bits_per_cycle", self.device.bits_per_cycle),
            ("device.tx_power_w", self.device.tx_power_w),
            ("network.bandwidth_hz", self.network.bandwidth_hz),
            ("network.ref_gain", self.network.ref_gain),
            ("network.ref_distance_m", self.network.ref_distance_m),
            ("network.min_distance_m", self.network.min_distance_m),
            ("network.max_distance_m", self.network.max_distance_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if self.network.min_distance_m > self.network.max_distance_m {
            return fail("network.min_distance_m exceeds network.max_distance_m".into());
        }
        Ok(())
    }

    fn canonical_json(&self) -> String {
        // Where the metrics land is not part of the experiment identity.
        let mut identity = self.clone();
        identity.out_dir = String::new();
        serde_json::to_string(&identity).expect("config serializes")
    }

    /// Hash of the complete configuration (modulo the output directory).
    pub fn config_hash(&self) -> String {
        hex_digest(&self.canonical_json())
    }

    /// Hash of the comparison domain: everything that must match for two
    /// runs to be comparable (dataset, partition, model, physics), leaving
    /// out the scheme, seed, and scheduler knobs that sweeps vary.
    pub fn compat_hash(&self) -> String {
        let core = serde_json::json!({
            "model": self.model,
            "data": self.data,
            "partition": self.partition,
            "network": self.network,
            "device": self.device,
            "minibatch": self.train.minibatch,
            "convergence": [self.train.convergence_window, self.train.convergence_variance],
        });
        hex_digest(&core.to_string())
    }
}

fn hex_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_reference_defaults() {
        let cfg = ExperimentConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(cfg.network.devices, 15);
        assert_eq!(cfg.network.max_selected, 6);
        assert_eq!(cfg.network.delay_budget_s, 1.0);
        assert_eq!(cfg.network.bandwidth_hz, 15_000.0);
        assert_eq!(cfg.device.tx_power_w, 0.5);
        assert_eq!(cfg.network.noise_dbm, -174.0);
        assert_eq!(cfg.device.cpu_hz, 3.3e9);
        assert_eq!(cfg.device.bits_per_cycle, 64.0);
        assert_eq!(cfg.device.rho, 2.8e6);
        assert_eq!(cfg.partition.samples_per_device, 200);
        assert_eq!(cfg.train.rounds, 1000);
        assert_eq!(cfg.rl.real_rounds, 20);
        assert_eq!(cfg.rl.iota, 0.02);
        assert_eq!(cfg.bound.rate_l, 0.02);
        // D = 217728 derived from the reference 784-256-64-10 network.
        assert_eq!(cfg.tx_size_params(), 217_728);
        assert_eq!(cfg.mult_ops(), 217_728);
    }

    #[test]
    fn flags_take_precedence_over_file() {
        let dir = std::env::temp_dir().join(format!("bitfed-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.toml");
        std::fs::write(&path, "[network]\ndevices = 15\nmax_selected = 3\n").unwrap();
        let overrides = Overrides { devices: Some(4), ..Overrides::default() };
        let cfg = ExperimentConfig::load(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.network.devices, 4);
        assert_eq!(cfg.network.max_selected, 3);
    }

    #[test]
    fn budget_exceeding_devices_is_rejected() {
        let overrides = Overrides { devices: Some(4), ..Overrides::default() };
        // Default max_selected = 6 > 4 devices.
        let err = ExperimentConfig::load(None, &overrides).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "got {err:?}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let dir = std::env::temp_dir().join(format!("bitfed-cfg2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.toml");
        std::fs::write(&path, "definitely_not_a_key = 1\n").unwrap();
        let err = ExperimentConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("definitely_not_a_key"), "diagnostic was: {msg}");
    }

    #[test]
    fn hashes_separate_scheme_from_physics() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.scheme = Scheme::Binary;
        b.seed = 99;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.compat_hash(), b.compat_hash());
        let mut c = a.clone();
        c.network.devices = 10;
        c.network.max_selected = 5;
        assert_ne!(a.compat_hash(), c.compat_hash());
    }
}
