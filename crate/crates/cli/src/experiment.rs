//! End-to-end execution of one experiment: dataset assembly, environment
//! construction, the chosen scheme, and deterministic metrics output.

use crate::config::{DataSource, ExperimentConfig, PartitionKind, Scheme};
use crate::metrics::{write_csv, MetricsRecord, RunSummary};
use crate::{CliError, Result};
use bitfed_core::bound::{BoundParams, EstimateOptions, EstimateReport, LearningRates};
use bitfed_core::datasets::{load_idx, partition, synthetic, Dataset, PartitionMode};
use bitfed_core::federation::{
    accuracy, run_training, ConvergenceRule, EnvSetup, FederationEnv, FLRoundResult,
    RlEnvironment, Scheduler,
};
use bitfed_core::rl::{
    discretize_state, plan_policy, policy_forward, sample_action, train_model_based,
    train_model_free, GradProxy, ModelBasedConfig, ModelFreeConfig, PlanningConfig,
    PolicyScheduler, RandomScheduler, StateSpace,
};
use bitfed_core::rng::{stream, StreamKind};
use bitfed_core::wireless::{dbm_to_watts, ChannelModel, DeviceProfile, NetworkConfig};
use rand::Rng;
use std::path::{Path, PathBuf};

pub struct RunArtifacts {
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: RunSummary,
}

/// Scheme label used in file names and the CSV header; the pinned-bitwidth
/// scheme carries its bitwidth so sweeps stay distinguishable.
pub fn scheme_label(cfg: &ExperimentConfig) -> String {
    match cfg.scheme {
        Scheme::Fixed => format!("fixed{}", cfg.train.fixed_alpha),
        s => s.as_str().to_string(),
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let full = match cfg.data.source {
        DataSource::Synthetic => synthetic(
            cfg.data.classes,
            cfg.data.feature_dim,
            cfg.data.per_class,
            cfg.data.data_seed,
        )?,
        DataSource::Idx => {
            let images = cfg.data.images.as_ref().expect("validated");
            let labels = cfg.data.labels.as_ref().expect("validated");
            load_idx(Path::new(images), Path::new(labels))?
        }
    };
    // The held-out split is keyed by the data seed so every run over the
    // same dataset sees the same split.
    let mut split_rng = stream(cfg.data.data_seed, StreamKind::Partition, u64::MAX);
    Ok(full.split_holdout(cfg.data.holdout_fraction, &mut split_rng))
}

fn build_env(cfg: &ExperimentConfig, train: Dataset) -> Result<FederationEnv> {
    let mode = match cfg.partition.mode {
        PartitionKind::Iid => PartitionMode::Iid {
            samples_per_device: (cfg.partition.samples_per_device > 0)
                .then_some(cfg.partition.samples_per_device),
        },
        PartitionKind::Noniid => PartitionMode::NonIid {
            labels_per_device: cfg.partition.labels_per_device,
            samples_per_device: cfg.partition.samples_per_device,
        },
    };
    let part = partition(&train, cfg.network.devices, mode, cfg.seed)?;
    let mut dist_rng = stream(cfg.seed, StreamKind::Profiles, 0);
    let profiles: Vec<DeviceProfile> = (0..cfg.network.devices)
        .map(|_| DeviceProfile {
            rho: cfg.device.rho,
            cpu_hz: cfg.device.cpu_hz,
            bits_per_cycle: cfg.device.bits_per_cycle,
            distance_m: dist_rng.gen_range(cfg.network.min_distance_m..=cfg.network.max_distance_m),
            tx_power_w: cfg.device.tx_power_w,
        })
        .collect();
    let net = NetworkConfig {
        max_selected: cfg.network.max_selected,
        delay_budget_s: cfg.network.delay_budget_s,
        tx_size_params: cfg.tx_size_params(),
        mult_ops: cfg.mult_ops(),
        full_bitwidth: cfg.model.full_bitwidth,
    };
    Ok(FederationEnv::new(EnvSetup {
        dataset: train,
        partition: part,
        profiles,
        channel_model: ChannelModel {
            ref_gain: cfg.network.ref_gain,
            ref_distance_m: cfg.network.ref_distance_m,
        },
        bandwidth_hz: cfg.network.bandwidth_hz,
        noise_w: dbm_to_watts(cfg.network.noise_dbm),
        net,
        layer_dims: cfg.model.layer_dims.clone(),
        full_bitwidth: cfg.model.full_bitwidth,
        lambda: cfg.model.lambda,
        batch_size: (cfg.train.minibatch > 0).then_some(cfg.train.minibatch),
        seed: cfg.seed,
    })?)
}

fn convergence_rule(cfg: &ExperimentConfig) -> ConvergenceRule {
    ConvergenceRule {
        window: cfg.train.convergence_window,
        variance_threshold: cfg.train.convergence_variance,
    }
}

fn estimate_options(cfg: &ExperimentConfig) -> EstimateOptions {
    EstimateOptions {
        rates: LearningRates {
            l: cfg.bound.rate_l,
            zeta1: cfg.bound.rate_zeta1,
            zeta2: cfg.bound.rate_zeta2,
            beps2: cfg.bound.rate_beps2,
            ups4m2: cfg.bound.rate_beps2,
        },
        steps: cfg.bound.steps,
        restarts: cfg.bound.restarts,
        seed: cfg.seed,
        init: BoundParams::convex(
            cfg.bound.init_l,
            cfg.bound.init_zeta1,
            cfg.bound.init_zeta2,
            cfg.bound.init_beps2,
        ),
    }
}

fn planning_config(cfg: &ExperimentConfig) -> PlanningConfig {
    PlanningConfig {
        iterations: cfg.rl.planning_iterations,
        trajectories_per_iter: cfg.rl.plan_trajectories,
        horizon: cfg.rl.plan_horizon,
        batch_trajectories: cfg.rl.plan_batch,
        replay_capacity: cfg.rl.replay_capacity,
        iota: cfg.rl.iota,
        baseline: cfg.rl.baseline,
    }
}

struct SchemeOutcome {
    /// Per-round phase labels, aligned with the environment history.
    phases: Vec<&'static str>,
    /// Bound-parameter snapshot per round (None before estimation).
    est_timeline: Vec<Option<BoundParams>>,
    converged_at: Option<usize>,
    bound_params: Option<BoundParams>,
    estimate_loss: Option<f64>,
    grad_proxy_kappa: Option<f64>,
    planning_env_rounds: usize,
}

/// Deployment loop of the model-based scheme: greedy policy execution with
/// the global convergence window, optionally re-fitting the bound (and
/// re-planning) every `reestimate_every` rounds.
#[allow(clippy::too_many_arguments)]
fn deploy_model_based(
    env: &mut FederationEnv,
    cfg: &ExperimentConfig,
    theta: bitfed_core::rl::PolicyParams,
    space: StateSpace,
    bitwidths: &[u32],
    params: BoundParams,
    proxy: GradProxy,
    rule: &ConvergenceRule,
) -> Result<(Option<usize>, BoundParams)> {
    let mut theta = theta;
    let mut params = params;
    let budget = cfg.train.rounds.saturating_sub(env.rounds_executed());
    let mut losses = Vec::new();
    let mut sched = PolicyScheduler::new(theta.clone(), space.clone(), bitwidths.to_vec(), true, cfg.seed);
    for round in 0..budget {
        if cfg.rl.reestimate_every > 0 && round > 0 && round % cfg.rl.reestimate_every == 0 {
            let report = bitfed_core::bound::estimate_params(&env.records, &estimate_options(cfg))?;
            params = report.params;
            let refreshed_proxy = GradProxy::fit(&env.records);
            theta = plan_policy(
                env,
                &params,
                &refreshed_proxy,
                &space,
                bitwidths,
                &planning_config(cfg),
                cfg.seed.wrapping_add(round as u64),
            )?;
            sched =
                PolicyScheduler::new(theta.clone(), space.clone(), bitwidths.to_vec(), true, cfg.seed);
        }
        let view = env.begin_round()?;
        let action = sched.choose(env.current_loss(), round, &view)?;
        let record = env.execute(&action)?;
        losses.push(record.f_next);
        if rule.fires(&losses) {
            return Ok((Some(env.rounds_executed()), params));
        }
    }
    let _ = proxy;
    Ok((None, params))
}

fn execute_scheme(env: &mut FederationEnv, cfg: &ExperimentConfig) -> Result<SchemeOutcome> {
    let rule = convergence_rule(cfg);
    let bitwidths = cfg.bitwidths();
    match cfg.scheme {
        Scheme::FullPrecision | Scheme::Binary | Scheme::Fixed => {
            let alpha = match cfg.scheme {
                Scheme::FullPrecision => cfg.model.full_bitwidth,
                Scheme::Binary => 1,
                _ => cfg.train.fixed_alpha,
            };
            let mut sched = RandomScheduler::new(vec![alpha], Some(alpha), cfg.seed);
            let records = run_training(env, &mut sched, cfg.train.rounds, Some(&rule))?;
            let converged_at =
                (records.len() < cfg.train.rounds).then(|| env.rounds_executed());
            Ok(SchemeOutcome {
                phases: vec!["run"; env.history.len()],
                est_timeline: vec![None; env.history.len()],
                converged_at,
                bound_params: None,
                estimate_loss: None,
                grad_proxy_kappa: None,
                planning_env_rounds: 0,
            })
        }
        Scheme::ModelFree => {
            let mf = ModelFreeConfig {
                max_rounds: cfg.train.rounds,
                update_every: cfg.rl.update_every,
                iota: cfg.rl.iota,
                bitwidths,
                levels: cfg.rl.levels,
                baseline: cfg.rl.baseline,
                convergence: Some(rule),
                seed: cfg.seed,
            };
            let (_theta, records) = train_model_free(env, &mf)?;
            let converged_at =
                (records.len() < cfg.train.rounds).then(|| env.rounds_executed());
            Ok(SchemeOutcome {
                phases: vec!["run"; env.history.len()],
                est_timeline: vec![None; env.history.len()],
                converged_at,
                bound_params: None,
                estimate_loss: None,
                grad_proxy_kappa: None,
                planning_env_rounds: 0,
            })
        }
        Scheme::Proposed => {
            let mb = ModelBasedConfig {
                real_rounds: cfg.rl.real_rounds,
                bitwidths: bitwidths.clone(),
                levels: cfg.rl.levels,
                estimate: estimate_options(cfg),
                planning: planning_config(cfg),
                seed: cfg.seed,
            };
            let outcome = train_model_based(env, &mb)?;
            let warmup = outcome.phase1.len();
            let (converged_at, final_params) = deploy_model_based(
                env,
                cfg,
                outcome.theta,
                outcome.space,
                &bitwidths,
                outcome.bound.clone(),
                outcome.grad_proxy,
                &rule,
            )?;
            let mut phases = vec!["warmup"; warmup];
            let mut est_timeline: Vec<Option<BoundParams>> = vec![None; warmup];
            for _ in warmup..env.history.len() {
                phases.push("deploy");
                est_timeline.push(Some(final_params.clone()));
            }
            Ok(SchemeOutcome {
                phases,
                est_timeline,
                converged_at,
                bound_params: Some(final_params),
                estimate_loss: Some(outcome.estimate_loss),
                grad_proxy_kappa: Some(outcome.grad_proxy.kappa),
                planning_env_rounds: outcome.planning_env_rounds,
            })
        }
    }
}

/// Run the configured experiment end to end and write the metrics CSV and
/// the summary document. Returns the artifact paths.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let (train, heldout) = load_dataset(cfg)?;
    let mut env = build_env(cfg, train)?;
    let outcome = execute_scheme(&mut env, cfg)?;

    let history: Vec<FLRoundResult> = std::mem::take(&mut env.history);
    let mut records = Vec::with_capacity(history.len());
    let mut cum_delay = 0.0;
    for (i, round) in history.iter().enumerate() {
        cum_delay += round.delay;
        let test_accuracy = if heldout.is_empty() {
            0.0
        } else {
            accuracy(&round.global_model, &heldout)?
        };
        let selected: String = round
            .action
            .selected
            .iter()
            .map(|&s| if s { '1' } else { '0' })
            .collect();
        records.push(MetricsRecord {
            round: i + 1,
            cum_delay_s: cum_delay,
            loss: round.loss,
            loss_selected: round.loss_selected,
            test_accuracy,
            alpha: round.action.alpha,
            selected,
            num_selected: round.action.num_selected(),
            interactions: i + 1,
            phase: outcome.phases[i].to_string(),
            grad_norm_sq: round.grad_norm_sq,
            est: outcome.est_timeline[i].clone(),
        });
    }

    let label = scheme_label(cfg);
    let summary = RunSummary {
        scheme: label.clone(),
        seed: cfg.seed,
        config_hash: cfg.config_hash(),
        compat_hash: cfg.compat_hash(),
        rounds_executed: records.len(),
        converged_at: outcome.converged_at,
        final_loss: records.last().map_or(f64::NAN, |r| r.loss),
        final_accuracy: records.last().map_or(0.0, |r| r.test_accuracy),
        cumulative_delay_s: cum_delay,
        real_interactions: records.len(),
        planning_env_rounds: outcome.planning_env_rounds,
        bound_params: outcome.bound_params,
        estimate_loss: outcome.estimate_loss,
        grad_proxy_kappa: outcome.grad_proxy_kappa,
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    let stem = format!("{label}-seed{}", cfg.seed);
    let csv_path = Path::new(&cfg.out_dir).join(format!("{stem}.csv"));
    let summary_path = Path::new(&cfg.out_dir).join(format!("{stem}.summary.json"));
    write_csv(
        &csv_path,
        &summary.config_hash,
        &summary.compat_hash,
        &label,
        cfg.seed,
        &records,
    )?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Config(format!("summary serialization: {e}")))?;
    std::fs::write(&summary_path, json + "\n")?;
    Ok(RunArtifacts { csv_path, summary_path, summary })
}

/// The `estimate` verb: run the warmup rounds and fit the bound constants,
/// without deploying any policy.
pub fn estimate_only(cfg: &ExperimentConfig) -> Result<(EstimateReport, usize)> {
    cfg.validate()?;
    let (train, _heldout) = load_dataset(cfg)?;
    let mut env = build_env(cfg, train)?;
    let mut sched = RandomScheduler::new(cfg.bitwidths(), None, cfg.seed);
    let records = run_training(&mut env, &mut sched, cfg.rl.real_rounds, None)?;
    let report = bitfed_core::bound::estimate_params(&records, &estimate_options(cfg))?;
    Ok((report, records.len()))
}

/// Greedy action the trained policy would take right now; exposed for
/// diagnostics and tests.
pub fn policy_action_preview(
    env: &mut FederationEnv,
    theta: &bitfed_core::rl::PolicyParams,
    space: &StateSpace,
    bitwidths: &[u32],
    seed: u64,
) -> Result<bitfed_core::Action> {
    let view = env.begin_round()?;
    let bin = discretize_state(env.current_loss(), space);
    let out = policy_forward(theta, bin, space);
    let mut rng = stream(seed, StreamKind::Scheduler, 77);
    Ok(sample_action(&out, bitwidths, &view, &mut rng)?.0)
}
