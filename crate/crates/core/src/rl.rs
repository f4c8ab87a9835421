//! MDP formulation and schedulers: the model-based planner that trains a
//! policy against the fitted transition bound, the model-free
//! policy-gradient baseline that learns from real rounds, and the random
//! baselines.
//!
//! The policy is factored: one logistic head per device for selection and
//! one categorical head over the candidate bitwidths, each a linear map of
//! the encoded state (normalized bin index plus a bias). Sampled actions
//! are projected to feasibility before execution, and gradients are taken
//! at the executed action.

use crate::action::Action;
use crate::bound::{
    bound_step, estimate_params, BoundParams, EstimateOptions, StepFeatures, TransitionRecord,
};
use crate::error::{Error, Result};
use crate::federation::{run_training, ConstraintView, RlEnvironment, Scheduler};
use crate::rng::{stream, SeededRng, StreamKind};
use crate::wireless::{ChannelState, DeviceProfile, NetworkConfig};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Discretized loss state space: uniform bins over `[0, f_max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpace {
    pub levels: usize,
    pub f_max: f64,
}

impl StateSpace {
    pub fn new(levels: usize, f_max: f64) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidArgument("state space needs >= 2 levels".into()));
        }
        if !(f_max.is_finite() && f_max > 0.0) {
            return Err(Error::InvalidArgument("f_max must be positive".into()));
        }
        Ok(Self { levels, f_max })
    }

    /// Center of a bin, used to seed simulated rollouts.
    pub fn bin_center(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * self.f_max / self.levels as f64
    }
}

/// Map a loss to its bin; losses at or above `f_max` land in the top bin.
pub fn discretize_state(f: f64, space: &StateSpace) -> usize {
    if f >= space.f_max {
        return space.levels - 1;
    }
    let bin = (f.max(0.0) / space.f_max * space.levels as f64).floor() as usize;
    bin.min(space.levels - 1)
}

/// Reward of reaching a state with loss `f`.
pub fn reward(f: f64) -> f64 {
    -f
}

/// Factored policy parameters: per-device selection heads followed by the
/// bitwidth head, each `(weight, bias)` over the encoded state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub device_count: usize,
    pub bitwidth_count: usize,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(device_count: usize, bitwidth_count: usize) -> Self {
        Self { device_count, bitwidth_count, theta: vec![0.0; 2 * (device_count + bitwidth_count)] }
    }

    fn head(&self, index: usize) -> (f64, f64) {
        (self.theta[2 * index], self.theta[2 * index + 1])
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

fn encode_state(bin: usize, space: &StateSpace) -> [f64; 2] {
    [bin as f64 / (space.levels - 1) as f64, 1.0]
}

#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub select_probs: Vec<f64>,
    pub bitwidth_probs: Vec<f64>,
}

/// Per-device selection probabilities (logistic) and the bitwidth
/// distribution (softmax) at a state.
pub fn policy_forward(theta: &PolicyParams, state_bin: usize, space: &StateSpace) -> PolicyOutput {
    let x = encode_state(state_bin, space);
    let select_probs = (0..theta.device_count)
        .map(|m| {
            let (w, b) = theta.head(m);
            1.0 / (1.0 + (-(w * x[0] + b * x[1])).exp())
        })
        .collect();
    let logits: Vec<f64> = (0..theta.bitwidth_count)
        .map(|k| {
            let (w, b) = theta.head(theta.device_count + k);
            w * x[0] + b * x[1]
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    PolicyOutput { select_probs, bitwidth_probs: exps.iter().map(|e| e / z).collect() }
}

/// Log-probability of an executed action under the factored policy: the
/// sum of the per-device selection terms and the bitwidth term.
pub fn action_log_prob(out: &PolicyOutput, selected: &[bool], alpha_idx: usize) -> f64 {
    let mut lp = 0.0;
    for (&sel, &p) in selected.iter().zip(&out.select_probs) {
        lp += if sel { p.ln() } else { (1.0 - p).ln() };
    }
    lp + out.bitwidth_probs[alpha_idx].ln()
}

/// Analytic gradient of [`action_log_prob`] with respect to `theta`.
pub fn grad_log_prob(
    theta: &PolicyParams,
    space: &StateSpace,
    state_bin: usize,
    selected: &[bool],
    alpha_idx: usize,
) -> Vec<f64> {
    let x = encode_state(state_bin, space);
    let out = policy_forward(theta, state_bin, space);
    let mut grad = vec![0.0; theta.len()];
    for m in 0..theta.device_count {
        let u = if selected[m] { 1.0 } else { 0.0 };
        let d = u - out.select_probs[m];
        grad[2 * m] = d * x[0];
        grad[2 * m + 1] = d * x[1];
    }
    for k in 0..theta.bitwidth_count {
        let ind = if k == alpha_idx { 1.0 } else { 0.0 };
        let d = ind - out.bitwidth_probs[k];
        let at = 2 * (theta.device_count + k);
        grad[at] = d * x[0];
        grad[at + 1] = d * x[1];
    }
    grad
}

/// Sample an action from the policy output and project it to feasibility:
/// devices are drawn independently, the bitwidth categorically; if more
/// than the RB budget comes up the top devices by probability are kept,
/// an empty draw falls back to the most probable device, and the delay
/// constraint is repaired through the wireless module. Returns the
/// executed action and the bitwidth index it maps to.
pub fn sample_action(
    out: &PolicyOutput,
    bitwidths: &[u32],
    view: &ConstraintView,
    rng: &mut SeededRng,
) -> Result<(Action, usize)> {
    let m = out.select_probs.len();
    let mut selected: Vec<bool> = out
        .select_probs
        .iter()
        .map(|&p| rng.gen_range(0.0..1.0) < p)
        .collect();
    let alpha_idx = {
        let draw: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut idx = bitwidths.len() - 1;
        for (k, &q) in out.bitwidth_probs.iter().enumerate() {
            acc += q;
            if draw < acc {
                idx = k;
                break;
            }
        }
        idx
    };
    if !selected.iter().any(|&s| s) {
        let best = argmax(&out.select_probs);
        selected[best] = true;
    }
    let budget = view.net.max_selected;
    if selected.iter().filter(|&&s| s).count() > budget {
        let mut order: Vec<usize> = (0..m).filter(|&i| selected[i]).collect();
        order.sort_by(|&a, &b| {
            out.select_probs[b]
                .partial_cmp(&out.select_probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        selected = vec![false; m];
        for &i in order.iter().take(budget) {
            selected[i] = true;
        }
    }
    let raw = Action::new(selected, bitwidths[alpha_idx]);
    let act = view.repair(&raw, Some(bitwidths))?;
    let executed_idx = bitwidths
        .iter()
        .position(|&a| a == act.alpha)
        .unwrap_or(0);
    Ok((act, executed_idx))
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// One step of a (real or simulated) trajectory in policy coordinates.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub state_bin: usize,
    pub selected: Vec<bool>,
    pub alpha_idx: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
}

/// REINFORCE-style estimator: per trajectory `(1/T) sum_t r_t grad log
/// pi(s_t, a_t)`, averaged over trajectories. `baseline` subtracts the
/// trajectory's mean reward before weighting (off by default).
pub fn policy_gradient(
    trajectories: &[Trajectory],
    theta: &PolicyParams,
    space: &StateSpace,
    baseline: bool,
) -> Result<Vec<f64>> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let mut grad = vec![0.0; theta.len()];
    let mut used = 0usize;
    for traj in trajectories {
        if traj.steps.is_empty() {
            continue;
        }
        used += 1;
        let inv_t = 1.0 / traj.steps.len() as f64;
        let base = if baseline {
            traj.steps.iter().map(|s| s.reward).sum::<f64>() * inv_t
        } else {
            0.0
        };
        for step in &traj.steps {
            let g = grad_log_prob(theta, space, step.state_bin, &step.selected, step.alpha_idx);
            let w = (step.reward - base) * inv_t;
            for (acc, gv) in grad.iter_mut().zip(&g) {
                *acc += w * gv;
            }
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument("all trajectories empty".into()));
    }
    let inv = 1.0 / used as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(grad)
}

/// Ascent step `theta + iota * grad`.
pub fn update_policy(theta: &PolicyParams, grad: &[f64], iota: f64) -> Result<PolicyParams> {
    if iota <= 0.0 {
        return Err(Error::InvalidArgument(format!("iota must be positive, got {iota}")));
    }
    if grad.len() != theta.len() {
        return Err(Error::ShapeMismatch("gradient length != parameter length".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("policy gradient".into()));
    }
    let mut out = theta.clone();
    for (t, g) in out.theta.iter_mut().zip(grad) {
        *t += iota * g;
    }
    Ok(out)
}

/// Baseline scheduler: a random feasible subset of 1..=U devices with a
/// random (or pinned) bitwidth from the candidate set.
pub struct RandomScheduler {
    pub bitwidths: Vec<u32>,
    pub fixed_alpha: Option<u32>,
    rng: SeededRng,
}

impl RandomScheduler {
    pub fn new(bitwidths: Vec<u32>, fixed_alpha: Option<u32>, seed: u64) -> Self {
        Self { bitwidths, fixed_alpha, rng: stream(seed, StreamKind::Scheduler, 0) }
    }
}

impl Scheduler for RandomScheduler {
    fn choose(&mut self, _loss: f64, _round: usize, view: &ConstraintView) -> Result<Action> {
        let m = view.profiles.len();
        let want = self.rng.gen_range(1..=view.net.max_selected.min(m));
        let mut order: Vec<usize> = (0..m).collect();
        for i in 0..want {
            let j = self.rng.gen_range(i..m);
            order.swap(i, j);
        }
        let mut selected = vec![false; m];
        for &i in order.iter().take(want) {
            selected[i] = true;
        }
        let alpha = match self.fixed_alpha {
            Some(a) => a,
            None => self.bitwidths[self.rng.gen_range(0..self.bitwidths.len())],
        };
        let allowed: Vec<u32> = match self.fixed_alpha {
            Some(a) => vec![a],
            None => self.bitwidths.clone(),
        };
        view.repair(&Action::new(selected, alpha), Some(&allowed))
    }
}

/// Scheduler that executes the policy, sampling by default or greedily
/// (most probable action) when deployed.
pub struct PolicyScheduler {
    pub theta: PolicyParams,
    pub space: StateSpace,
    pub bitwidths: Vec<u32>,
    pub greedy: bool,
    rng: SeededRng,
}

impl PolicyScheduler {
    pub fn new(
        theta: PolicyParams,
        space: StateSpace,
        bitwidths: Vec<u32>,
        greedy: bool,
        seed: u64,
    ) -> Self {
        Self { theta, space, bitwidths, greedy, rng: stream(seed, StreamKind::Scheduler, 1) }
    }

    /// The most probable action at a state, before repair.
    pub fn greedy_action(&self, loss: f64, view: &ConstraintView) -> Action {
        let bin = discretize_state(loss, &self.space);
        let out = policy_forward(&self.theta, bin, &self.space);
        let mut selected: Vec<bool> = out.select_probs.iter().map(|&p| p > 0.5).collect();
        if !selected.iter().any(|&s| s) {
            selected[argmax(&out.select_probs)] = true;
        }
        if selected.iter().filter(|&&s| s).count() > view.net.max_selected {
            let mut order: Vec<usize> =
                (0..selected.len()).filter(|&i| selected[i]).collect();
            order.sort_by(|&a, &b| {
                out.select_probs[b]
                    .partial_cmp(&out.select_probs[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            selected = vec![false; selected.len()];
            for &i in order.iter().take(view.net.max_selected) {
                selected[i] = true;
            }
        }
        Action::new(selected, self.bitwidths[argmax(&out.bitwidth_probs)])
    }
}

impl Scheduler for PolicyScheduler {
    fn choose(&mut self, loss: f64, _round: usize, view: &ConstraintView) -> Result<Action> {
        if self.greedy {
            view.repair(&self.greedy_action(loss, view), Some(&self.bitwidths))
        } else {
            let bin = discretize_state(loss, &self.space);
            let out = policy_forward(&self.theta, bin, &self.space);
            Ok(sample_action(&out, &self.bitwidths, view, &mut self.rng)?.0)
        }
    }
}

/// Plays back a fixed action sequence (reference runs and tests).
pub struct ScriptedScheduler {
    actions: Vec<Action>,
    at: usize,
}

impl ScriptedScheduler {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, at: 0 }
    }
}

impl Scheduler for ScriptedScheduler {
    fn choose(&mut self, _loss: f64, _round: usize, _view: &ConstraintView) -> Result<Action> {
        let a = self
            .actions
            .get(self.at)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("scripted action list exhausted".into()))?;
        self.at += 1;
        Ok(a)
    }
}

/// Linear proxy `||grad F||^2 ~= kappa * F` fitted on observed rounds, used
/// to supply the gradient feature at simulated states during planning.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradProxy {
    pub kappa: f64,
}

impl GradProxy {
    pub fn fit(records: &[TransitionRecord]) -> Self {
        let num: f64 = records.iter().map(|r| r.grad_norm_sq * r.f_t).sum();
        let den: f64 = records.iter().map(|r| r.f_t * r.f_t).sum();
        Self { kappa: if den > 0.0 { num / den } else { 0.0 } }
    }

    pub fn grad_norm_sq(&self, f: f64) -> f64 {
        self.kappa * f
    }
}

/// Synthetic environment whose dynamics are exactly the one-step bound
/// with known constants. Used to verify the planner against exhaustive
/// enumeration and to compare sample efficiency.
pub struct PlantedEnv {
    pub params: BoundParams,
    pub grad_proxy: GradProxy,
    device_samples: Vec<f64>,
    net: NetworkConfig,
    profiles: Vec<DeviceProfile>,
    loss: f64,
    rounds: usize,
    pub records: Vec<TransitionRecord>,
}

impl PlantedEnv {
    /// An unconstrained-delay planted environment: only the RB budget and
    /// bitwidth range bind.
    pub fn new(
        params: BoundParams,
        grad_proxy: GradProxy,
        device_samples: Vec<f64>,
        max_selected: usize,
        full_bitwidth: u32,
        initial_loss: f64,
    ) -> Self {
        let m = device_samples.len();
        let profiles = vec![
            DeviceProfile {
                rho: 1e-12,
                cpu_hz: 1e9,
                bits_per_cycle: 64.0,
                distance_m: 1.0,
                tx_power_w: 0.1,
            };
            m
        ];
        let net = NetworkConfig {
            max_selected,
            delay_budget_s: 1e30,
            tx_size_params: 1,
            mult_ops: 1,
            full_bitwidth,
        };
        Self {
            params,
            grad_proxy,
            device_samples,
            net,
            profiles,
            loss: initial_loss,
            rounds: 0,
            records: Vec::new(),
        }
    }

    fn features(&self, action: &Action) -> StepFeatures {
        let a: f64 = action
            .selected
            .iter()
            .zip(&self.device_samples)
            .filter(|(&s, _)| s)
            .map(|(_, &n)| n)
            .sum();
        StepFeatures {
            grad_norm_sq: self.grad_proxy.grad_norm_sq(self.loss),
            selected_samples: a,
            total_samples: self.device_samples.iter().sum(),
            alpha: action.alpha,
            device_count: self.device_samples.len(),
            full_bitwidth: self.net.full_bitwidth,
        }
    }

    fn view(&self) -> ConstraintView {
        ConstraintView {
            profiles: self.profiles.clone(),
            channel: ChannelState {
                gains: vec![1.0; self.profiles.len()],
                bandwidth_hz: 1e9,
                noise_w: 1e-12,
            },
            net: self.net.clone(),
        }
    }
}

impl RlEnvironment for PlantedEnv {
    fn device_count(&self) -> usize {
        self.device_samples.len()
    }

    fn device_batch_sizes(&self) -> Vec<f64> {
        self.device_samples.clone()
    }

    fn total_samples(&self) -> f64 {
        self.device_samples.iter().sum()
    }

    fn full_bitwidth(&self) -> u32 {
        self.net.full_bitwidth
    }

    fn max_selected(&self) -> usize {
        self.net.max_selected
    }

    fn current_loss(&self) -> f64 {
        self.loss
    }

    fn rounds_executed(&self) -> usize {
        self.rounds
    }

    fn begin_round(&mut self) -> Result<ConstraintView> {
        Ok(self.view())
    }

    fn execute(&mut self, action: &Action) -> Result<TransitionRecord> {
        if action.num_selected() == 0 {
            return Err(Error::EmptySelection);
        }
        if action.num_selected() > self.net.max_selected {
            return Err(Error::InfeasibleAction("RbBudget".into()));
        }
        let features = self.features(action);
        let delta = bound_step(&features, &self.params)?;
        let f_next = (self.loss + delta).max(0.0);
        let record = TransitionRecord {
            f_t: self.loss,
            action: action.clone(),
            f_next,
            grad_norm_sq: features.grad_norm_sq,
            selected_samples: features.selected_samples,
            total_samples: features.total_samples,
            full_bitwidth: self.net.full_bitwidth,
        };
        self.loss = f_next;
        self.rounds += 1;
        self.records.push(record.clone());
        Ok(record)
    }

    fn sample_constraints(&self, _rng: &mut SeededRng) -> ConstraintView {
        self.view()
    }
}

/// Phase-3 planning knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanningConfig {
    /// Planning iterations `H`.
    pub iterations: usize,
    /// Fresh simulated trajectories generated per iteration.
    pub trajectories_per_iter: usize,
    /// Length of each simulated trajectory.
    pub horizon: usize,
    /// Trajectories sampled from the replay buffer per update.
    pub batch_trajectories: usize,
    pub replay_capacity: usize,
    /// Policy learning rate.
    pub iota: f64,
    /// Mean-reward baseline subtraction (off: the printed estimator).
    pub baseline: bool,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            trajectories_per_iter: 4,
            horizon: 10,
            batch_trajectories: 8,
            replay_capacity: 256,
            iota: 0.02,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelBasedConfig {
    /// Real-interaction budget `I` before planning starts.
    pub real_rounds: usize,
    /// Candidate bitwidths (the action set `Y`).
    pub bitwidths: Vec<u32>,
    /// State-space levels.
    pub levels: usize,
    pub estimate: EstimateOptions,
    pub planning: PlanningConfig,
    pub seed: u64,
}

impl ModelBasedConfig {
    /// Candidate bitwidths `{1, 2, 4, 8, 16, V}` clipped to the
    /// full-precision width.
    pub fn default_bitwidths(v: u32) -> Vec<u32> {
        let mut set: Vec<u32> = [1u32, 2, 4, 8, 16, v]
            .into_iter()
            .filter(|&a| a >= 1 && a <= v)
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// Train a fresh policy purely on simulated rollouts through a fitted
/// transition model. The environment is consulted only for constraint
/// views (channel draws with a planner-owned stream); no rounds execute.
pub fn plan_policy<E>(
    env: &E,
    params: &BoundParams,
    grad_proxy: &GradProxy,
    space: &StateSpace,
    bitwidths: &[u32],
    planning: &PlanningConfig,
    seed: u64,
) -> Result<PolicyParams>
where
    E: RlEnvironment + ?Sized,
{
    let m = env.device_count();
    let device_samples = env.device_batch_sizes();
    let total = env.total_samples();
    let v = env.full_bitwidth();
    let mut theta = PolicyParams::zeros(m, bitwidths.len());
    let mut replay: VecDeque<Trajectory> = VecDeque::new();
    let mut rng = stream(seed, StreamKind::Planner, 0);
    for _ in 0..planning.iterations {
        for _ in 0..planning.trajectories_per_iter {
            let start_bin = rng.gen_range(0..space.levels);
            let mut f = space.bin_center(start_bin);
            let mut traj = Trajectory::default();
            for _ in 0..planning.horizon {
                let bin = discretize_state(f, space);
                let out = policy_forward(&theta, bin, space);
                let view = env.sample_constraints(&mut rng);
                let (action, alpha_idx) = sample_action(&out, bitwidths, &view, &mut rng)?;
                let features = StepFeatures {
                    grad_norm_sq: grad_proxy.grad_norm_sq(f),
                    selected_samples: action
                        .selected
                        .iter()
                        .zip(&device_samples)
                        .filter(|(&s, _)| s)
                        .map(|(_, &n)| n)
                        .sum(),
                    total_samples: total,
                    alpha: action.alpha,
                    device_count: m,
                    full_bitwidth: v,
                };
                let (f_next, _) = crate::bound::predict_next_state(f, &features, params)?;
                traj.steps.push(TrajectoryStep {
                    state_bin: bin,
                    selected: action.selected.clone(),
                    alpha_idx,
                    reward: reward(f_next),
                });
                f = f_next;
            }
            if replay.len() == planning.replay_capacity {
                replay.pop_front();
            }
            replay.push_back(traj);
        }
        if replay.is_empty() {
            continue;
        }
        let batch: Vec<Trajectory> = (0..planning.batch_trajectories.min(replay.len()))
            .map(|_| replay[rng.gen_range(0..replay.len())].clone())
            .collect();
        let grad = policy_gradient(&batch, &theta, space, planning.baseline)?;
        theta = update_policy(&theta, &grad, planning.iota)?;
    }
    Ok(theta)
}

#[derive(Debug, Clone)]
pub struct ModelBasedOutcome {
    pub theta: PolicyParams,
    pub space: StateSpace,
    pub bound: BoundParams,
    pub estimate_loss: f64,
    pub grad_proxy: GradProxy,
    /// Records of the I real warmup rounds.
    pub phase1: Vec<TransitionRecord>,
    /// Real environment rounds consumed by the planning phase (always 0).
    pub planning_env_rounds: usize,
}

/// Model-based training: I random real rounds fill the transition buffer,
/// the bound constants are regressed from it, and the policy then trains
/// exclusively on simulated rollouts through the fitted transition model.
pub fn train_model_based<E>(env: &mut E, cfg: &ModelBasedConfig) -> Result<ModelBasedOutcome>
where
    E: RlEnvironment + ?Sized,
{
    let space = StateSpace::new(cfg.levels, env.current_loss())?;

    // Phase 1: random real interactions.
    let mut random = RandomScheduler::new(cfg.bitwidths.clone(), None, cfg.seed);
    let phase1 = run_training(env, &mut random, cfg.real_rounds, None)?;

    // Phase 2: fit the transition model.
    let report = estimate_params(&phase1, &cfg.estimate)?;
    let grad_proxy = GradProxy::fit(&phase1);

    // Phase 3: policy optimization against the fitted model only.
    let rounds_before_planning = env.rounds_executed();
    let theta = plan_policy(
        env,
        &report.params,
        &grad_proxy,
        &space,
        &cfg.bitwidths,
        &cfg.planning,
        cfg.seed,
    )?;
    let planning_env_rounds = env.rounds_executed() - rounds_before_planning;
    debug_assert_eq!(planning_env_rounds, 0, "planning must not touch the environment");

    Ok(ModelBasedOutcome {
        theta,
        space,
        bound: report.params,
        estimate_loss: report.loss,
        grad_proxy,
        phase1,
        planning_env_rounds,
    })
}

#[derive(Debug, Clone)]
pub struct ModelFreeConfig {
    pub max_rounds: usize,
    /// Rounds per policy update (each chunk forms one trajectory).
    pub update_every: usize,
    pub iota: f64,
    pub bitwidths: Vec<u32>,
    pub levels: usize,
    pub baseline: bool,
    pub convergence: Option<crate::federation::ConvergenceRule>,
    pub seed: u64,
}

/// Model-free baseline: the same policy class and gradient estimator, but
/// every trajectory comes from real environment rounds.
pub fn train_model_free<E>(
    env: &mut E,
    cfg: &ModelFreeConfig,
) -> Result<(PolicyParams, Vec<TransitionRecord>)>
where
    E: RlEnvironment + ?Sized,
{
    let space = StateSpace::new(cfg.levels, env.current_loss())?;
    let mut theta = PolicyParams::zeros(env.device_count(), cfg.bitwidths.len());
    let mut rng = stream(cfg.seed, StreamKind::Scheduler, 2);
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let mut chunk = Trajectory::default();
    for _ in 0..cfg.max_rounds {
        let view = env.begin_round()?;
        let bin = discretize_state(env.current_loss(), &space);
        let out = policy_forward(&theta, bin, &space);
        let (action, alpha_idx) = sample_action(&out, &cfg.bitwidths, &view, &mut rng)?;
        let record = env.execute(&action)?;
        chunk.steps.push(TrajectoryStep {
            state_bin: bin,
            selected: action.selected.clone(),
            alpha_idx,
            reward: reward(record.f_next),
        });
        losses.push(record.f_next);
        records.push(record);
        if chunk.steps.len() >= cfg.update_every {
            let traj = std::mem::take(&mut chunk);
            let grad = policy_gradient(&[traj], &theta, &space, cfg.baseline)?;
            theta = update_policy(&theta, &grad, cfg.iota)?;
        }
        if let Some(rule) = &cfg.convergence {
            if rule.fires(&losses) {
                break;
            }
        }
    }
    Ok((theta, records))
}

/// Exhaustively enumerate every feasible action (nonempty selections up to
/// the RB budget times the candidate bitwidths) and return the one whose
/// predicted next loss is smallest. Ties break toward the first action in
/// enumeration order.
pub fn enumerate_best_action(
    params: &BoundParams,
    grad_proxy: &GradProxy,
    loss: f64,
    device_samples: &[f64],
    bitwidths: &[u32],
    view: &ConstraintView,
    full_bitwidth: u32,
) -> Result<Action> {
    let m = device_samples.len();
    if m > 20 {
        return Err(Error::InvalidArgument("enumeration limited to 20 devices".into()));
    }
    let total: f64 = device_samples.iter().sum();
    let mut best: Option<(f64, Action)> = None;
    for mask in 1u32..(1 << m) {
        let selected: Vec<bool> = (0..m).map(|i| mask >> i & 1 == 1).collect();
        if selected.iter().filter(|&&s| s).count() > view.net.max_selected {
            continue;
        }
        for &alpha in bitwidths {
            let action = Action::new(selected.clone(), alpha);
            if !view.feasible(&action)?.is_feasible() {
                continue;
            }
            let features = StepFeatures {
                grad_norm_sq: grad_proxy.grad_norm_sq(loss),
                selected_samples: selected
                    .iter()
                    .zip(device_samples)
                    .filter(|(&s, _)| s)
                    .map(|(_, &n)| n)
                    .sum(),
                total_samples: total,
                alpha,
                device_count: m,
                full_bitwidth,
            };
            let (f_next, _) = crate::bound::predict_next_state(loss, &features, params)?;
            let better = match &best {
                None => true,
                Some((incumbent, _)) => f_next < *incumbent,
            };
            if better {
                best = Some((f_next, action));
            }
        }
    }
    best.map(|(_, a)| a).ok_or(Error::EnvironmentInfeasible)
}
